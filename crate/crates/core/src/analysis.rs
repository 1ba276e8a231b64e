//! Pre-logit statistics, template analysis and PCA.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::SplitMix64;
use crate::train::Example;

/// A pre-logit vector with its gold label (0 = non-entity).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrelogitSample {
    pub sentence: usize,
    pub start: usize,
    pub end: usize,
    pub label: usize,
    pub vector: Vec<f64>,
}

/// Pre-logits of every candidate span, labelled by the gold set.
pub fn collect_prelogits(model: &Model, split: &[Example]) -> Result<Vec<PrelogitSample>> {
    let mut out = Vec::new();
    for (n, ex) in split.iter().enumerate() {
        let gold: BTreeMap<(usize, usize), usize> =
            ex.gold.iter().map(|&(s, e, t)| ((s, e), t)).collect();
        for p in model.score_spans(&ex.ids)? {
            let vector = p.prelogit.ok_or_else(|| {
                Error::Input(format!(
                    "head `{}` exposes no pre-logit representations",
                    model.config.head
                ))
            })?;
            out.push(PrelogitSample {
                sentence: n,
                start: p.start,
                end: p.end,
                label: gold.get(&(p.start, p.end)).copied().unwrap_or(0),
                vector,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    /// Negatives sampled per entity for the positive-vs-negative cosine.
    pub negative_ratio: usize,
    /// Largest pair population enumerated exhaustively; larger ones are
    /// sampled down to this many pairs.
    pub pair_cap: usize,
    pub seed: u64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            negative_ratio: 10,
            pair_cap: 1_000_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrelogitReport {
    pub entities: usize,
    pub sampled_negatives: usize,
    pub l2_norm: Option<f64>,
    /// Mean pairwise cosine within each type, averaged over types with at
    /// least two entities.
    pub within_class_cosine: Option<f64>,
    pub between_class_cosine: Option<f64>,
    pub pos_neg_cosine: Option<f64>,
    pub template_norms: Vec<f64>,
    pub template_abs_cosine: Option<f64>,
    pub template_abs_cosine_pos_pos: Option<f64>,
    pub template_abs_cosine_pos_neg: Option<f64>,
    pub pair_cap: usize,
    pub seed: u64,
}

pub fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (l2(a), l2(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let c = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    c.clamp(-1.0, 1.0)
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Mean of `f` over all pairs `(i, j)` produced by `pairs`, a population of
/// `count` pairs indexed `0..count`; sampled down to `cap` when larger.
fn pair_mean(
    count: usize,
    cap: usize,
    rng: &mut SplitMix64,
    pair: impl Fn(usize) -> f64,
) -> Option<f64> {
    if count <= cap {
        mean((0..count).map(&pair))
    } else {
        mean((0..cap).map(|_| pair(rng.below(count))))
    }
}

/// Unordered pair `idx` among `n` items, lexicographic.
fn unordered_pair(mut idx: usize, n: usize) -> (usize, usize) {
    let mut i = 0;
    loop {
        let row = n - i - 1;
        if idx < row {
            return (i, i + 1 + idx);
        }
        idx -= row;
        i += 1;
    }
}

fn within_mean(vs: &[&[f64]], cap: usize, rng: &mut SplitMix64) -> Option<f64> {
    let n = vs.len();
    let count = n * n.saturating_sub(1) / 2;
    if count <= cap {
        let mut all = Vec::with_capacity(count);
        for i in 0..n {
            for j in i + 1..n {
                all.push(cosine(vs[i], vs[j]));
            }
        }
        mean(all)
    } else {
        pair_mean(count, cap, rng, |p| {
            let (i, j) = unordered_pair(p, n);
            cosine(vs[i], vs[j])
        })
    }
}

fn cross_mean(a: &[&[f64]], b: &[&[f64]], cap: usize, rng: &mut SplitMix64) -> Option<f64> {
    pair_mean(a.len() * b.len(), cap, rng, |p| {
        cosine(a[p / b.len()], b[p % b.len()])
    })
}

/// Statistics of entity pre-logits and of the classifier templates (rows
/// of the output weight; row 0 is the non-entity class).
pub fn prelogit_report(
    samples: &[PrelogitSample],
    templates: &[Vec<f64>],
    opts: ReportOptions,
) -> Result<PrelogitReport> {
    if opts.pair_cap == 0 {
        return Err(Error::Config("pair cap must be positive".into()));
    }
    let mut rng = SplitMix64::new(opts.seed);
    let mut by_type: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
    let mut negatives: Vec<&[f64]> = Vec::new();
    for s in samples {
        if s.label == 0 {
            negatives.push(&s.vector);
        } else {
            by_type.entry(s.label).or_default().push(&s.vector);
        }
    }
    let entities: Vec<&[f64]> = by_type.values().flatten().copied().collect();

    let l2_norm = mean(entities.iter().map(|v| l2(v)));
    let within_class_cosine = mean(
        by_type
            .values()
            .filter(|vs| vs.len() >= 2)
            .filter_map(|vs| within_mean(vs, opts.pair_cap, &mut rng)),
    );

    // Pairs across different types, pooled.
    let groups: Vec<&Vec<&[f64]>> = by_type.values().collect();
    let mut cross_counts = Vec::new();
    for a in 0..groups.len() {
        for b in a + 1..groups.len() {
            cross_counts.push(((a, b), groups[a].len() * groups[b].len()));
        }
    }
    let cross_total: usize = cross_counts.iter().map(|c| c.1).sum();
    let between_class_cosine = pair_mean(cross_total, opts.pair_cap, &mut rng, |mut p| {
        for &((a, b), c) in &cross_counts {
            if p < c {
                let nb = groups[b].len();
                return cosine(groups[a][p / nb], groups[b][p % nb]);
            }
            p -= c;
        }
        unreachable!("pair index within the pooled population")
    });

    let want = (opts.negative_ratio * entities.len()).min(negatives.len());
    let mut idx: Vec<usize> = (0..negatives.len()).collect();
    // Partial Fisher-Yates: the first `want` entries are a uniform sample.
    for i in 0..want {
        let j = i + rng.below(idx.len() - i);
        idx.swap(i, j);
    }
    let sampled: Vec<&[f64]> = idx[..want].iter().map(|&i| negatives[i]).collect();
    let pos_neg_cosine = cross_mean(&entities, &sampled, opts.pair_cap, &mut rng);

    let template_norms: Vec<f64> = templates.iter().map(|t| l2(t)).collect();
    let rows: Vec<&[f64]> = templates.iter().map(Vec::as_slice).collect();
    let abs_pairs = |pairs: Vec<(usize, usize)>| {
        mean(
            pairs
                .into_iter()
                .map(|(i, j)| cosine(rows[i], rows[j]).abs()),
        )
    };
    let c = rows.len();
    let all: Vec<(usize, usize)> = (0..c)
        .flat_map(|i| (i + 1..c).map(move |j| (i, j)))
        .collect();
    let pos_pos: Vec<(usize, usize)> = all.iter().copied().filter(|&(i, _)| i > 0).collect();
    let pos_neg: Vec<(usize, usize)> = (1..c).map(|j| (0, j)).collect();

    Ok(PrelogitReport {
        entities: entities.len(),
        sampled_negatives: want,
        l2_norm,
        within_class_cosine,
        between_class_cosine,
        pos_neg_cosine,
        template_norms,
        template_abs_cosine: abs_pairs(all),
        template_abs_cosine_pos_pos: abs_pairs(pos_pos),
        template_abs_cosine_pos_neg: abs_pairs(pos_neg),
        pair_cap: opts.pair_cap,
        seed: opts.seed,
    })
}

/// Projection onto the leading principal components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit-norm components, one per row.
    pub components: Vec<Vec<f64>>,
    pub explained_variance_ratio: Vec<f64>,
    /// One row per input vector, one column per component.
    pub points: Vec<Vec<f64>>,
    /// Fewer than `k` components were found because the data has lower
    /// rank.
    pub rank_deficient: bool,
}

const POWER_MAX_ITERS: usize = 200_000;
const POWER_TOL: f64 = 1e-14;

fn mat_vec(c: &[f64], d: usize, v: &[f64]) -> Vec<f64> {
    (0..d)
        .map(|i| (0..d).map(|j| c[i * d + j] * v[j]).sum())
        .collect()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = l2(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Mean-centres the vectors and extracts the top `k` eigenvectors of the
/// sample covariance by power iteration with deflation. Each component's
/// largest-magnitude coordinate is made positive.
pub fn pca_project(vectors: &[Vec<f64>], k: usize) -> Result<Pca> {
    if k == 0 {
        return Err(Error::Input("at least one component requested".into()));
    }
    if vectors.len() < k + 1 {
        return Err(Error::Input(format!(
            "PCA with {k} components needs at least {} vectors, got {}",
            k + 1,
            vectors.len()
        )));
    }
    let d = vectors[0].len();
    if d == 0 || vectors.iter().any(|v| v.len() != d) {
        return Err(Error::Input(
            "PCA vectors must share a positive dimension".into(),
        ));
    }
    let n = vectors.len();
    let mut mean = vec![0.0; d];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centred: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| v.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![0.0; d * d];
    for v in &centred {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += v[i] * v[j];
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= (n - 1) as f64);
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();

    let mut components = Vec::new();
    let mut ratios = Vec::new();
    let mut rank_deficient = false;
    let mut rng = SplitMix64::new(0x5EED);
    for _ in 0..k.min(d) {
        if trace <= 0.0 {
            rank_deficient = true;
            break;
        }
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        normalize(&mut v);
        let mut lambda = 0.0;
        for _ in 0..POWER_MAX_ITERS {
            let mut w = mat_vec(&cov, d, &v);
            lambda = normalize(&mut w);
            if lambda == 0.0 {
                break;
            }
            let delta = w
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            v = w;
            if delta < POWER_TOL {
                break;
            }
        }
        let cv = mat_vec(&cov, d, &v);
        let rayleigh: f64 = cv.iter().zip(&v).map(|(a, b)| a * b).sum();
        if lambda == 0.0 || rayleigh <= 1e-12 * trace {
            rank_deficient = true;
            break;
        }
        let pivot = v.iter().enumerate().fold(
            0,
            |best, (i, x)| if x.abs() > v[best].abs() { i } else { best },
        );
        if v[pivot] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] -= rayleigh * v[i] * v[j];
            }
        }
        ratios.push(rayleigh / trace);
        components.push(v);
    }
    if components.len() < k {
        rank_deficient = true;
    }
    let points = centred
        .iter()
        .map(|x| {
            components
                .iter()
                .map(|c| c.iter().zip(x).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect();
    Ok(Pca {
        mean,
        components,
        explained_variance_ratio: ratios,
        points,
        rank_deficient,
    })
}

/// Distinct labels present among samples, for summaries.
pub fn labels_present(samples: &[PrelogitSample]) -> Vec<usize> {
    let set: HashSet<usize> = samples.iter().map(|s| s.label).collect();
    let mut v: Vec<usize> = set.into_iter().collect();
    v.sort_unstable();
    v
}
