//! Exact-match micro metrics and their grouped breakdowns.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::data::{nestedness_tag, NestednessTag};

/// `(start, end, type index)`, end-exclusive.
pub type TypedSpan = (usize, usize, usize);

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Prf {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
        }
    }

    fn add(&mut self, tp: usize, fp: usize, fn_: usize) {
        *self = Self::from_counts(self.tp + tp, self.fp + fp, self.fn_ + fn_);
    }
}

fn as_set(spans: &[TypedSpan]) -> HashSet<TypedSpan> {
    spans.iter().copied().collect()
}

/// Micro P/R/F1 over a split; entry `n` of each list is sentence `n`.
pub fn micro_prf<P, G>(preds: &[P], golds: &[G]) -> Prf
where
    P: AsRef<[TypedSpan]>,
    G: AsRef<[TypedSpan]>,
{
    assert_eq!(preds.len(), golds.len(), "one prediction set per sentence");
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g) in preds.iter().zip(golds) {
        let (p, g) = (as_set(p.as_ref()), as_set(g.as_ref()));
        let hit = p.intersection(&g).count();
        tp += hit;
        fp += p.len() - hit;
        fn_ += g.len() - hit;
    }
    Prf::from_counts(tp, fp, fn_)
}

/// Shared bucketing loop: every prediction lands in `key(pred)`, every gold
/// in `key(gold)`; matches count once in their common bucket.
fn bucketed<P, G, K, F>(preds: &[P], golds: &[G], mut key: F) -> BTreeMap<K, Prf>
where
    P: AsRef<[TypedSpan]>,
    G: AsRef<[TypedSpan]>,
    K: Ord,
    F: FnMut(usize, TypedSpan) -> K,
{
    assert_eq!(preds.len(), golds.len(), "one prediction set per sentence");
    let mut out: BTreeMap<K, Prf> = BTreeMap::new();
    for (n, (p, g)) in preds.iter().zip(golds).enumerate() {
        let (p, g) = (as_set(p.as_ref()), as_set(g.as_ref()));
        let mut pv: Vec<_> = p.iter().copied().collect();
        pv.sort_unstable();
        for s in pv {
            let hit = g.contains(&s);
            out.entry(key(n, s))
                .or_default()
                .add(hit as usize, (!hit) as usize, 0);
        }
        let mut gv: Vec<_> = g.difference(&p).copied().collect();
        gv.sort_unstable();
        for s in gv {
            out.entry(key(n, s)).or_default().add(0, 0, 1);
        }
    }
    out
}

/// Bucket key for a span width; widths above `merge_above` share the
/// bucket `merge_above + 1`.
pub fn length_bucket(width: usize, merge_above: Option<usize>) -> usize {
    match merge_above {
        Some(m) if width > m => m + 1,
        _ => width,
    }
}

/// Per-width P/R/F1. Buckets without any prediction or gold are omitted.
pub fn f1_by_length<P, G>(
    preds: &[P],
    golds: &[G],
    merge_above: Option<usize>,
) -> BTreeMap<usize, Prf>
where
    P: AsRef<[TypedSpan]>,
    G: AsRef<[TypedSpan]>,
{
    bucketed(preds, golds, |_, (s, e, _)| {
        length_bucket(e - s, merge_above)
    })
}

/// P/R/F1 within each nested-structure bucket; spans are tagged against
/// their sentence's gold ranges.
pub fn f1_by_nestedness<P, G>(preds: &[P], golds: &[G]) -> BTreeMap<NestednessTag, Prf>
where
    P: AsRef<[TypedSpan]>,
    G: AsRef<[TypedSpan]>,
{
    let ranges: Vec<Vec<(usize, usize)>> = golds
        .iter()
        .map(|g| {
            let mut r: Vec<_> = g.as_ref().iter().map(|&(s, e, _)| (s, e)).collect();
            r.sort_unstable();
            r.dedup();
            r
        })
        .collect();
    bucketed(preds, golds, |n, (s, e, _)| {
        nestedness_tag((s, e), &ranges[n])
    })
}

/// Sums bucket counts back into one PRF.
pub fn merge_buckets<'a>(buckets: impl IntoIterator<Item = &'a Prf>) -> Prf {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for b in buckets {
        tp += b.tp;
        fp += b.fp;
        fn_ += b.fn_;
    }
    Prf::from_counts(tp, fp, fn_)
}
