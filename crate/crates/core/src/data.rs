//! Sentences, vocabularies, corpus formats, nestedness tags and the
//! synthetic corpus generator.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
/// Name of the non-entity class (index 0).
pub const NON_ENTITY: &str = "O";

/// A typed span, end-exclusive.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Entity {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub label: String,
}

impl Entity {
    pub fn new(start: usize, end: usize, label: impl Into<String>) -> Self {
        Self {
            start,
            end,
            label: label.into(),
        }
    }

    pub fn width(&self) -> usize {
        self.end - self.start
    }

    pub fn range(&self) -> (usize, usize) {
        (self.start, self.end)
    }
}

/// Tokens plus a gold set of entities, kept sorted and duplicate-free.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub gold: Vec<Entity>,
}

impl Sentence {
    pub fn new(tokens: Vec<String>, gold: Vec<Entity>) -> Result<Self> {
        Self::with_line(tokens, gold, None)
    }

    fn with_line(tokens: Vec<String>, mut gold: Vec<Entity>, line: Option<usize>) -> Result<Self> {
        let n = tokens.len();
        for e in &gold {
            if e.start >= e.end || e.end > n {
                return Err(Error::Data {
                    line,
                    message: format!(
                        "entity ({}, {}, {}) outside a sentence of {n} tokens",
                        e.start, e.end, e.label
                    ),
                });
            }
        }
        gold.sort();
        gold.dedup();
        for pair in gold.windows(2) {
            if pair[0].range() == pair[1].range() {
                return Err(Error::Data {
                    line,
                    message: format!(
                        "span ({}, {}) labelled both {} and {}",
                        pair[0].start, pair[0].end, pair[0].label, pair[1].label
                    ),
                });
            }
        }
        Ok(Self { tokens, gold })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn gold_ranges(&self) -> Vec<(usize, usize)> {
        self.gold.iter().map(Entity::range).collect()
    }
}

/// Token and type indices. Frozen after construction from the training
/// split; unseen tokens map to [`UNK`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabParts", into = "VocabParts")]
pub struct Vocab {
    tokens: Vec<String>,
    types: Vec<String>,
    token_index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabParts {
    tokens: Vec<String>,
    types: Vec<String>,
}

impl TryFrom<VocabParts> for Vocab {
    type Error = Error;

    fn try_from(p: VocabParts) -> Result<Self> {
        Vocab::from_parts(p.tokens, p.types)
    }
}

impl From<Vocab> for VocabParts {
    fn from(v: Vocab) -> Self {
        VocabParts {
            tokens: v.tokens,
            types: v.types,
        }
    }
}

impl Vocab {
    /// Tokens in order of first appearance; types sorted by name after the
    /// non-entity class.
    pub fn build(train: &[Sentence]) -> Self {
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let mut seen: HashMap<String, usize> = tokens.iter().cloned().zip(0..).collect();
        let mut types = std::collections::BTreeSet::new();
        for s in train {
            for t in &s.tokens {
                if !seen.contains_key(t) {
                    seen.insert(t.clone(), tokens.len());
                    tokens.push(t.clone());
                }
            }
            types.extend(s.gold.iter().map(|e| e.label.clone()));
        }
        let types = std::iter::once(NON_ENTITY.to_string())
            .chain(types)
            .collect();
        Self {
            tokens,
            types,
            token_index: seen,
        }
    }

    /// Rebuilds from stored token and type lists.
    pub fn from_parts(tokens: Vec<String>, types: Vec<String>) -> Result<Self> {
        if tokens.get(PAD).map(String::as_str) != Some(PAD_TOKEN)
            || tokens.get(UNK).map(String::as_str) != Some(UNK_TOKEN)
            || types.first().map(String::as_str) != Some(NON_ENTITY)
        {
            return Err(Error::Config(
                "vocabulary lacks its reserved entries".into(),
            ));
        }
        let token_index: HashMap<String, usize> = tokens.iter().cloned().zip(0..).collect();
        if token_index.len() != tokens.len() {
            return Err(Error::Config("vocabulary has duplicate tokens".into()));
        }
        Ok(Self {
            tokens,
            types,
            token_index,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn types(&self) -> &[String] {
        &self.types
    }

    /// Entity types, excluding the non-entity class.
    pub fn num_types(&self) -> usize {
        self.types.len() - 1
    }

    pub fn token_id(&self, token: &str) -> usize {
        self.token_index.get(token).copied().unwrap_or(UNK)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.token_id(t)).collect()
    }

    pub fn type_index(&self, label: &str) -> Option<usize> {
        self.types.iter().position(|t| t == label)
    }

    pub fn type_name(&self, index: usize) -> Option<&str> {
        self.types.get(index).map(String::as_str)
    }

    /// Gold spans as `(start, end, type index)`; types unknown to the
    /// vocabulary are an error.
    pub fn typed_gold(&self, s: &Sentence) -> Result<Vec<(usize, usize, usize)>> {
        s.gold
            .iter()
            .map(|e| {
                self.type_index(&e.label)
                    .filter(|&t| t != 0)
                    .map(|t| (e.start, e.end, t))
                    .ok_or_else(|| Error::Data {
                        line: None,
                        message: format!("entity type `{}` not in the vocabulary", e.label),
                    })
            })
            .collect()
    }
}

/// Input corpus format.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Bio,
    Jsonl,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bio" => Ok(Format::Bio),
            "jsonl" => Ok(Format::Jsonl),
            other => Err(Error::Config(format!("unknown data format `{other}`"))),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Bio => "bio",
            Format::Jsonl => "jsonl",
        })
    }
}

impl Format {
    /// Guesses from the file extension; `.jsonl`/`.json` are span records,
    /// anything else BIO.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl" | "json") => Format::Jsonl,
            _ => Format::Bio,
        }
    }
}

pub fn load_corpus(path: &Path, format: Format) -> Result<Vec<Sentence>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match format {
        Format::Bio => parse_bio(&text, false),
        Format::Jsonl => parse_json_spans(&text),
    }
}

pub fn save_corpus(path: &Path, sentences: &[Sentence], format: Format) -> Result<()> {
    let text = match format {
        Format::Bio => write_bio(sentences)?,
        Format::Jsonl => write_json_spans(sentences)?,
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses `token<TAB>tag` lines with blank-line sentence separators.
///
/// An `I-X` that does not continue an `X` run starts a new entity (with a
/// warning) unless `strict` is set.
pub fn parse_bio(text: &str, strict: bool) -> Result<Vec<Sentence>> {
    let mut out = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    let mut gold = Vec::new();
    let mut open: Option<(usize, String)> = None;
    let mut first_line = 1;

    let close = |open: &mut Option<(usize, String)>, gold: &mut Vec<Entity>, end: usize| {
        if let Some((start, label)) = open.take() {
            gold.push(Entity::new(start, end, label));
        }
    };

    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            if !tokens.is_empty() {
                close(&mut open, &mut gold, tokens.len());
                out.push(Sentence::with_line(
                    std::mem::take(&mut tokens),
                    std::mem::take(&mut gold),
                    Some(first_line),
                )?);
            }
            continue;
        }
        if tokens.is_empty() {
            first_line = line_no;
        }
        let (token, tag) = line.split_once('\t').ok_or_else(|| Error::Data {
            line: Some(line_no),
            message: "expected `token<TAB>tag`".into(),
        })?;
        let tag = tag.trim();
        let pos = tokens.len();
        if tag == "O" {
            close(&mut open, &mut gold, pos);
        } else if let Some(label) = tag.strip_prefix("B-") {
            close(&mut open, &mut gold, pos);
            open = Some((pos, label.to_string()));
        } else if let Some(label) = tag.strip_prefix("I-") {
            let continues = matches!(&open, Some((_, l)) if l == label);
            if !continues {
                if strict {
                    return Err(Error::Data {
                        line: Some(line_no),
                        message: format!("`I-{label}` does not continue an entity of that type"),
                    });
                }
                log::warn!("line {line_no}: `I-{label}` without a preceding `{label}` run; treated as `B-{label}`");
                close(&mut open, &mut gold, pos);
                open = Some((pos, label.to_string()));
            }
        } else {
            return Err(Error::Data {
                line: Some(line_no),
                message: format!("unknown tag `{tag}`"),
            });
        }
        tokens.push(token.to_string());
    }
    if !tokens.is_empty() {
        close(&mut open, &mut gold, tokens.len());
        out.push(Sentence::with_line(tokens, gold, Some(first_line))?);
    }
    Ok(out)
}

/// BIO rendering; overlapping gold spans cannot be expressed and are an
/// error.
pub fn write_bio(sentences: &[Sentence]) -> Result<String> {
    let mut out = String::new();
    for (n, s) in sentences.iter().enumerate() {
        let mut tags = vec!["O".to_string(); s.len()];
        let mut covered = vec![false; s.len()];
        for e in &s.gold {
            if covered[e.start..e.end].iter().any(|&c| c) {
                return Err(Error::Data {
                    line: None,
                    message: format!(
                        "sentence {n} has overlapping entities; BIO cannot encode them"
                    ),
                });
            }
            for (k, pos) in (e.start..e.end).enumerate() {
                covered[pos] = true;
                tags[pos] = format!("{}-{}", if k == 0 { "B" } else { "I" }, e.label);
            }
        }
        for (t, tag) in s.tokens.iter().zip(&tags) {
            out.push_str(t);
            out.push('\t');
            out.push_str(tag);
            out.push('\n');
        }
        out.push('\n');
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct JsonRecord {
    tokens: Vec<String>,
    #[serde(default)]
    entities: Vec<Entity>,
}

/// One `{"tokens": [...], "entities": [{"start", "end", "type"}]}` record
/// per line; blank lines are skipped.
pub fn parse_json_spans(text: &str) -> Result<Vec<Sentence>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord = serde_json::from_str(line).map_err(|e| Error::Data {
            line: Some(n + 1),
            message: e.to_string(),
        })?;
        out.push(Sentence::with_line(rec.tokens, rec.entities, Some(n + 1))?);
    }
    Ok(out)
}

pub fn write_json_spans(sentences: &[Sentence]) -> Result<String> {
    let mut out = String::new();
    for s in sentences {
        let rec = JsonRecord {
            tokens: s.tokens.clone(),
            entities: s.gold.clone(),
        };
        out.push_str(&serde_json::to_string(&rec).map_err(|e| Error::Data {
            line: None,
            message: e.to_string(),
        })?);
        out.push('\n');
    }
    Ok(out)
}

/// Structural relation of a span to the gold entities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NestednessTag {
    Nested,
    Covering,
    Both,
    Flat,
}

impl NestednessTag {
    pub const ALL: [NestednessTag; 4] = [
        NestednessTag::Nested,
        NestednessTag::Covering,
        NestednessTag::Both,
        NestednessTag::Flat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NestednessTag::Nested => "nested",
            NestednessTag::Covering => "covering",
            NestednessTag::Both => "both",
            NestednessTag::Flat => "flat",
        }
    }
}

impl fmt::Display for NestednessTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `inner` lies strictly inside `outer`: both boundaries differ.
pub fn strictly_inside(inner: (usize, usize), outer: (usize, usize)) -> bool {
    outer.0 < inner.0 && inner.1 < outer.1
}

/// Nested: inside a gold entity that covers another gold entity.
/// Covering: covers a gold entity that is nested inside another gold
/// entity. Both: both conditions. Flat: neither.
pub fn nestedness_tag(span: (usize, usize), gold: &[(usize, usize)]) -> NestednessTag {
    let covers_gold = |g: (usize, usize)| gold.iter().any(|&a| strictly_inside(a, g));
    let nested_gold = |a: (usize, usize)| gold.iter().any(|&g| strictly_inside(a, g));
    let nested = gold
        .iter()
        .any(|&g| strictly_inside(span, g) && covers_gold(g));
    let covering = gold
        .iter()
        .any(|&a| strictly_inside(a, span) && nested_gold(a));
    match (nested, covering) {
        (true, true) => NestednessTag::Both,
        (true, false) => NestednessTag::Nested,
        (false, true) => NestednessTag::Covering,
        (false, false) => NestednessTag::Flat,
    }
}

/// Whether any gold entity lies strictly inside another.
pub fn has_nested_pair(gold: &[(usize, usize)]) -> bool {
    gold.iter()
        .any(|&a| gold.iter().any(|&b| strictly_inside(a, b)))
}

pub const SYNTH_TYPES: [&str; 3] = ["LOC", "ORG", "PER"];
const NAMES_PER_TYPE: usize = 4;

fn open_token(label: &str) -> String {
    format!("({label}")
}

fn close_token(label: &str) -> String {
    format!("{label})")
}

fn name_token(label: &str, k: usize) -> String {
    format!("{}{k}", label.to_lowercase())
}

/// Synthetic corpus from a small deterministic grammar.
///
/// Entities are either a typed name token (`per2`) or a bracketed run
/// `(PER w3 w7 PER)` of filler words. With probability `nest_rate` an
/// entity is wrapped in a bracket pair of a different type, and wrapped
/// once more (three levels in total) with probability `nest_rate` again
/// when the result stays at most six tokens wide. Every label is a pure
/// function of the tokens. Filler words are `w0..w{vocab_size-1}`.
pub fn gen_synthetic(
    seed: u64,
    n_sentences: usize,
    vocab_size: usize,
    nest_rate: f64,
    max_len: usize,
) -> Result<Vec<Sentence>> {
    if !(0.0..=1.0).contains(&nest_rate) {
        return Err(Error::Config(format!(
            "nest rate {nest_rate} outside [0, 1]"
        )));
    }
    if vocab_size == 0 {
        return Err(Error::Config(
            "synthetic vocabulary needs filler words".into(),
        ));
    }
    if max_len < 8 {
        return Err(Error::Config(
            "synthetic sentences need max_len of at least 8".into(),
        ));
    }
    let mut rng = SplitMix64::new(seed);
    let filler = |rng: &mut SplitMix64| format!("w{}", rng.below(vocab_size));
    let mut out = Vec::with_capacity(n_sentences);
    for _ in 0..n_sentences {
        let mut tokens: Vec<String> = Vec::new();
        let mut gold = Vec::new();
        let n_entities = 1 + rng.below(3);
        for e in 0..n_entities {
            // Entity tokens relative to its own start, plus its gold spans.
            let mut ent: Vec<String> = Vec::new();
            let mut spans: Vec<(usize, usize, &str)> = Vec::new();
            let mut used = Vec::new();
            let base = SYNTH_TYPES[rng.below(SYNTH_TYPES.len())];
            used.push(base);
            if rng.next_f64() < 0.5 {
                ent.push(name_token(base, rng.below(NAMES_PER_TYPE)));
            } else {
                ent.push(open_token(base));
                for _ in 0..1 + rng.below(2) {
                    ent.push(filler(&mut rng));
                }
                ent.push(close_token(base));
            }
            spans.push((0, ent.len(), base));
            let mut level = 0;
            while level < 2 && ent.len() + 2 <= 6 && rng.next_f64() < nest_rate {
                let free: Vec<&str> = SYNTH_TYPES
                    .iter()
                    .copied()
                    .filter(|t| !used.contains(t))
                    .collect();
                let outer = free[rng.below(free.len())];
                used.push(outer);
                ent.insert(0, open_token(outer));
                ent.push(close_token(outer));
                for s in &mut spans {
                    s.0 += 1;
                    s.1 += 1;
                }
                spans.push((0, ent.len(), outer));
                level += 1;
            }

            let gap = if e == 0 {
                rng.below(3)
            } else {
                1 + rng.below(2)
            };
            if tokens.len() + gap + ent.len() > max_len {
                if e == 0 {
                    // Always keep at least one entity.
                    let offset = tokens.len();
                    gold.extend(
                        spans
                            .iter()
                            .map(|&(a, b, t)| Entity::new(offset + a, offset + b, t)),
                    );
                    tokens.extend(ent);
                }
                break;
            }
            for _ in 0..gap {
                tokens.push(filler(&mut rng));
            }
            let offset = tokens.len();
            gold.extend(
                spans
                    .iter()
                    .map(|&(a, b, t)| Entity::new(offset + a, offset + b, t)),
            );
            tokens.extend(ent);
        }
        let tail = rng.below(3);
        for _ in 0..tail {
            if tokens.len() < max_len {
                tokens.push(filler(&mut rng));
            }
        }
        out.push(Sentence::new(tokens, gold)?);
    }
    Ok(out)
}

/// Entity counts per type, handy for corpus summaries.
pub fn type_counts(sentences: &[Sentence]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for s in sentences {
        for e in &s.gold {
            *counts.entry(e.label.clone()).or_insert(0) += 1;
        }
    }
    counts
}
