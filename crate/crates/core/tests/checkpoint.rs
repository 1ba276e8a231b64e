use dspert_core::checkpoint::{
    self, decode, encode, load_checkpoint, load_params_into, save_checkpoint, Checkpoint,
};
use dspert_core::data::gen_synthetic;
use dspert_core::{Error, Model, RunConfig, SplitMix64, Vocab};

fn fixture(seed: u64) -> Checkpoint {
    let corpus = gen_synthetic(1, 10, 8, 0.5, 10).unwrap();
    let vocab = Vocab::build(&corpus);
    let run = RunConfig::default();
    let mut cfg = run.model_config(vocab.len(), vocab.num_types());
    cfg.hidden = 8;
    cfg.ffn_inner = 16;
    cfg.lstm_hidden = 4;
    let model = Model::new(cfg, seed).unwrap();
    let mut rng = SplitMix64::new(99);
    rng.next_u64();
    Checkpoint {
        model,
        vocab,
        run,
        rng,
    }
}

#[test]
fn round_trip_is_bitwise() {
    let ck = fixture(1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ck");
    save_checkpoint(&path, &ck).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.vocab, ck.vocab);
    assert_eq!(back.run, ck.run);
    assert_eq!(back.model.config, ck.model.config);
    assert_eq!((back.rng.seed(), back.rng.position()), (99, 1));
    for ((_, a), (_, b)) in back.model.store.iter().zip(ck.model.store.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.group, b.group);
        let bits =
            |t: &dspert_core::Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value));
    }
    let ids = [2, 3, 4, 5, 6];
    let before = ck.model.score_spans(&ids).unwrap();
    let after = back.model.score_spans(&ids).unwrap();
    for (x, y) in before.iter().zip(&after) {
        assert!(x
            .probs
            .iter()
            .zip(&y.probs)
            .all(|(p, q)| p.to_bits() == q.to_bits()));
    }
    assert_eq!(encode(&back).unwrap(), encode(&ck).unwrap());
}

#[test]
fn truncation_and_corruption_are_reported() {
    let bytes = encode(&fixture(2)).unwrap();
    for cut in [
        0,
        5,
        12,
        40,
        bytes.len() / 2,
        bytes.len() - 20,
        bytes.len() - 1,
    ] {
        assert!(
            matches!(decode(&bytes[..cut]), Err(Error::Integrity { .. })),
            "cut at {cut}"
        );
    }
    let mut flipped = bytes.clone();
    let mid = bytes.len() / 2;
    flipped[mid] ^= 0x40;
    assert!(matches!(
        decode(&flipped),
        Err(Error::Integrity {
            section: "tensors",
            ..
        })
    ));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(decode(&magic), Err(Error::Integrity { .. })));
    let mut version = bytes.clone();
    version[8] = 99;
    assert!(matches!(decode(&version), Err(Error::Integrity { .. })));
    let mut trailing = bytes;
    trailing.push(0);
    assert!(matches!(decode(&trailing), Err(Error::Integrity { .. })));
}

#[test]
fn loading_into_a_different_shape_names_the_parameter() {
    let ck = fixture(3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ck");
    save_checkpoint(&path, &ck).unwrap();

    let mut same = Model::new(ck.model.config.clone(), 7).unwrap();
    load_params_into(&path, &mut same).unwrap();
    assert_eq!(
        same.score_spans(&[2, 3]).unwrap(),
        ck.model.score_spans(&[2, 3]).unwrap()
    );

    let mut cfg = ck.model.config.clone();
    cfg.width_dim += 1;
    let mut other = Model::new(cfg, 7).unwrap();
    match load_params_into(&path, &mut other) {
        Err(Error::Shape { name, .. }) => assert_eq!(name, "head.width_table"),
        other => panic!("expected a shape error, got {other:?}"),
    }
    let mut cfg = ck.model.config.clone();
    cfg.use_bilstm = false;
    let mut fewer = Model::new(cfg, 7).unwrap();
    assert!(matches!(
        load_params_into(&path, &mut fewer),
        Err(Error::Integrity { .. })
    ));
    assert!(matches!(
        load_checkpoint(&dir.path().join("nope")),
        Err(Error::Io { .. })
    ));
    assert_eq!(checkpoint::MAGIC, b"DSPERTCK");
}
