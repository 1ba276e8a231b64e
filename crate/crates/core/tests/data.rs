mod common;

use dspert_core::data::{
    self, gen_synthetic, has_nested_pair, nestedness_tag, parse_bio, parse_json_spans,
    strictly_inside, write_bio, write_json_spans, Entity, Format, NestednessTag, Sentence, Vocab,
    NON_ENTITY, PAD, UNK,
};
use dspert_core::{Error, SplitMix64};
use proptest::prelude::*;

fn sentence(tokens: &[&str], gold: &[(usize, usize, &str)]) -> Sentence {
    Sentence::new(
        tokens.iter().map(|t| t.to_string()).collect(),
        gold.iter().map(|&(s, e, l)| Entity::new(s, e, l)).collect(),
    )
    .unwrap()
}

#[test]
fn bio_examples() {
    let parsed = parse_bio(
        "John\tB-PER\nSmith\tI-PER\nruns\tO\n\nit\tO\nrains\tO\n",
        true,
    )
    .unwrap();
    assert_eq!(
        parsed,
        vec![
            sentence(&["John", "Smith", "runs"], &[(0, 2, "PER")]),
            sentence(&["it", "rains"], &[]),
        ]
    );
    let adjacent = parse_bio("a\tB-PER\nb\tB-PER\nc\tI-LOC\nd\tI-LOC", false).unwrap();
    assert_eq!(
        adjacent[0].gold,
        sentence(
            &["a", "b", "c", "d"],
            &[(0, 1, "PER"), (1, 2, "PER"), (2, 4, "LOC")]
        )
        .gold
    );
}

#[test]
fn bio_repair_and_strict_mode() {
    let lenient = parse_bio("Smith\tI-PER\nruns\tO\n", false).unwrap();
    assert_eq!(lenient[0].gold, vec![Entity::new(0, 1, "PER")]);
    assert!(matches!(
        parse_bio("x\tO\n\nSmith\tI-PER\n", true),
        Err(Error::Data { line: Some(3), .. })
    ));
    assert!(matches!(
        parse_bio("a\tB-PER\nb\tI-LOC\n", true),
        Err(Error::Data { line: Some(2), .. })
    ));
    assert!(matches!(
        parse_bio("a B-PER\n", false),
        Err(Error::Data { line: Some(1), .. })
    ));
    assert!(matches!(
        parse_bio("a\tX-PER\n", false),
        Err(Error::Data { .. })
    ));
}

#[test]
fn json_examples() {
    let s = parse_json_spans(
        "{\"tokens\":[\"a\",\"b\",\"c\"],\"entities\":[{\"start\":0,\"end\":3,\"type\":\"ORG\"},{\"start\":1,\"end\":2,\"type\":\"PER\"}]}\n\n{\"tokens\":[\"x\"],\"entities\":[]}\n{\"tokens\":[\"y\"]}",
    )
    .unwrap();
    assert_eq!(s.len(), 3);
    assert!(has_nested_pair(&s[0].gold_ranges()));
    assert!(s[1].gold.is_empty() && s[2].gold.is_empty());
    let backwards = "{\"tokens\":[\"a\",\"b\"],\"entities\":[]}\n{\"tokens\":[\"a\",\"b\"],\"entities\":[{\"start\":2,\"end\":1,\"type\":\"X\"}]}";
    assert!(matches!(
        parse_json_spans(backwards),
        Err(Error::Data { line: Some(2), .. })
    ));
    let out_of_range = "{\"tokens\":[\"a\"],\"entities\":[{\"start\":0,\"end\":2,\"type\":\"X\"}]}";
    assert!(matches!(
        parse_json_spans(out_of_range),
        Err(Error::Data { line: Some(1), .. })
    ));
    assert!(matches!(
        parse_json_spans("{not json"),
        Err(Error::Data { line: Some(1), .. })
    ));
}

#[test]
fn sentence_invariants() {
    let ok = Sentence::new(
        vec!["a".into(), "b".into()],
        vec![Entity::new(0, 1, "X"), Entity::new(0, 1, "X")],
    )
    .unwrap();
    assert_eq!(ok.gold.len(), 1);
    assert!(Sentence::new(
        vec!["a".into()],
        vec![Entity::new(0, 1, "X"), Entity::new(0, 1, "Y")]
    )
    .is_err());
    assert!(Sentence::new(vec!["a".into()], vec![Entity::new(1, 1, "X")]).is_err());
}

#[test]
fn write_bio_rejects_overlap() {
    let nested = sentence(&["a", "b", "c"], &[(0, 3, "ORG"), (1, 2, "PER")]);
    assert!(write_bio(&[nested]).is_err());
}

fn random_flat(rng: &mut SplitMix64) -> Sentence {
    let t = 1 + rng.below(10);
    let tokens: Vec<String> = (0..t).map(|_| format!("t{}", rng.below(5))).collect();
    let mut gold = Vec::new();
    let mut pos = 0;
    while pos < t {
        pos += rng.below(3);
        if pos >= t {
            break;
        }
        let end = pos + 1 + rng.below((t - pos).min(3));
        gold.push(Entity::new(pos, end, ["A", "B"][rng.below(2)]));
        pos = end;
    }
    Sentence::new(tokens, gold).unwrap()
}

fn random_nested(rng: &mut SplitMix64) -> Sentence {
    let t = 1 + rng.below(10);
    let tokens: Vec<String> = (0..t).map(|_| format!("t{}", rng.below(5))).collect();
    let gold = common::random_gold(rng, t, t, 3, 5)
        .into_iter()
        .map(|(s, e, ty)| Entity::new(s, e, ["A", "B", "C"][ty - 1]))
        .collect();
    Sentence::new(tokens, gold).unwrap()
}

#[test]
fn round_trips() {
    let mut rng = SplitMix64::new(1);
    let flat: Vec<Sentence> = (0..200).map(|_| random_flat(&mut rng)).collect();
    assert_eq!(parse_bio(&write_bio(&flat).unwrap(), true).unwrap(), flat);
    let nested: Vec<Sentence> = (0..200).map(|_| random_nested(&mut rng)).collect();
    assert_eq!(
        parse_json_spans(&write_json_spans(&nested).unwrap()).unwrap(),
        nested
    );

    let dir = tempfile::tempdir().unwrap();
    for (name, format) in [("c.jsonl", Format::Jsonl), ("c.bio", Format::Bio)] {
        let path = dir.path().join(name);
        assert_eq!(Format::from_path(&path), format);
        data::save_corpus(&path, &flat, format).unwrap();
        assert_eq!(data::load_corpus(&path, format).unwrap(), flat);
    }
    assert!(matches!(
        data::load_corpus(&dir.path().join("missing"), Format::Bio),
        Err(Error::Io { .. })
    ));
}

#[test]
fn nestedness_examples() {
    let gold = [(1, 3), (0, 5)];
    assert_eq!(nestedness_tag((2, 4), &gold), NestednessTag::Nested);
    assert_eq!(nestedness_tag((0, 4), &gold), NestednessTag::Covering);
    assert_eq!(nestedness_tag((6, 8), &gold), NestednessTag::Flat);
    // Inside the outer entity and around the inner one.
    assert_eq!(
        nestedness_tag((0, 4), &[(1, 2), (0, 5)]),
        NestednessTag::Covering
    );
    assert_eq!(
        nestedness_tag((1, 4), &[(2, 3), (0, 5)]),
        NestednessTag::Both
    );
    // Sharing a boundary is not strict containment.
    assert_eq!(
        nestedness_tag((0, 2), &[(0, 2), (0, 5)]),
        NestednessTag::Flat
    );
    assert!(strictly_inside((1, 2), (0, 3)));
    assert!(!strictly_inside((0, 2), (0, 3)));
    assert!(!strictly_inside((0, 3), (0, 3)));
}

#[test]
fn nestedness_matches_set_oracle() {
    let mut rng = SplitMix64::new(2);
    for _ in 0..1000 {
        let t = 1 + rng.below(12);
        let gold: Vec<(usize, usize)> = common::random_gold(&mut rng, t, t, 1, 6)
            .iter()
            .map(|g| (g.0, g.1))
            .collect();
        let s = rng.below(t);
        let span = (s, s + 1 + rng.below(t - s));
        let expected = match common::nestedness(span, &gold) {
            (true, true) => NestednessTag::Both,
            (true, false) => NestednessTag::Nested,
            (false, true) => NestednessTag::Covering,
            (false, false) => NestednessTag::Flat,
        };
        assert_eq!(
            nestedness_tag(span, &gold),
            expected,
            "{span:?} in {gold:?}"
        );
    }
}

#[test]
fn flat_corpora_tag_flat() {
    let mut rng = SplitMix64::new(3);
    for _ in 0..200 {
        let s = random_flat(&mut rng);
        let gold = s.gold_ranges();
        for i in 0..s.len() {
            for j in i + 1..=s.len() {
                assert_eq!(nestedness_tag((i, j), &gold), NestednessTag::Flat);
            }
        }
    }
}

#[test]
fn vocab_contract() {
    let train = [sentence(&["a", "b", "a"], &[(0, 1, "PER"), (1, 3, "LOC")])];
    let v = Vocab::build(&train);
    assert_eq!(v.token_id("<pad>"), PAD);
    assert_eq!(v.token_id("never seen"), UNK);
    assert_eq!(v.len(), 4);
    assert_eq!(v.types(), &[NON_ENTITY, "LOC", "PER"]);
    assert_eq!(v.type_index("PER"), Some(2));
    assert_eq!(v.type_name(0), Some(NON_ENTITY));
    assert_eq!(
        v.encode(&["b".into(), "zzz".into()]),
        vec![v.token_id("b"), UNK]
    );
    assert_eq!(v.typed_gold(&train[0]).unwrap(), vec![(0, 1, 2), (1, 3, 1)]);
    let unknown = sentence(&["a"], &[(0, 1, "ORG")]);
    assert!(v.typed_gold(&unknown).is_err());
    let json = serde_json::to_string(&v).unwrap();
    assert_eq!(serde_json::from_str::<Vocab>(&json).unwrap(), v);
    assert!(Vocab::from_parts(vec!["x".into(), "x".into()], vec![NON_ENTITY.into()]).is_err());
}

#[test]
fn generator_contract() {
    let a = gen_synthetic(7, 100, 20, 0.5, 16).unwrap();
    assert_eq!(a, gen_synthetic(7, 100, 20, 0.5, 16).unwrap());
    assert_ne!(a, gen_synthetic(8, 100, 20, 0.5, 16).unwrap());
    assert!(a.iter().all(|s| !s.gold.is_empty() && s.len() <= 16));

    let flat = gen_synthetic(1, 100, 20, 0.0, 16).unwrap();
    for s in &flat {
        let gold = s.gold_ranges();
        assert!(!has_nested_pair(&gold));
        for i in 0..s.len() {
            for j in i + 1..=s.len() {
                assert_eq!(nestedness_tag((i, j), &gold), NestednessTag::Flat);
            }
        }
    }
    let nested = gen_synthetic(1, 100, 20, 1.0, 16).unwrap();
    assert!(nested.iter().all(|s| has_nested_pair(&s.gold_ranges())));

    assert!(gen_synthetic(1, 5, 20, 1.5, 16).is_err());
    assert!(gen_synthetic(1, 5, 0, 0.5, 16).is_err());
    assert!(gen_synthetic(1, 5, 20, 0.5, 7).is_err());
}

#[test]
fn generator_labels_follow_tokens() {
    // Every gold span is either a name token or starts with `(X` and ends
    // with `X)`; conversely every such bracket pair is gold.
    for s in gen_synthetic(11, 200, 20, 0.6, 16).unwrap() {
        for e in &s.gold {
            let first = &s.tokens[e.start];
            if e.width() == 1 {
                assert!(first.starts_with(&e.label.to_lowercase()));
            } else {
                assert_eq!(first, &format!("({}", e.label));
                assert_eq!(&s.tokens[e.end - 1], &format!("{})", e.label));
            }
            assert!(e.width() <= 6);
        }
        let opens = s.tokens.iter().filter(|t| t.starts_with('(')).count();
        let names = s
            .tokens
            .iter()
            .filter(|t| !t.starts_with('w') && !t.contains('(') && !t.contains(')'))
            .count();
        assert_eq!(opens + names, s.gold.len());
    }
}

proptest! {
    #[test]
    fn json_round_trip_prop(seed in any::<u64>()) {
        let mut rng = SplitMix64::new(seed);
        let corpus: Vec<Sentence> = (0..5).map(|_| random_nested(&mut rng)).collect();
        prop_assert_eq!(parse_json_spans(&write_json_spans(&corpus).unwrap()).unwrap(), corpus);
    }
}
