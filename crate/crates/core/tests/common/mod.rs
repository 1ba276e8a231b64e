//! Plain-loop reference implementations used as test oracles. Nothing here
//! touches the autodiff graph.
#![allow(dead_code)]

use dspert_core::encoder::BlockParams;
use dspert_core::{ParamId, ParamStore, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn rows(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len(), "row counts differ");
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len(), "column counts differ");
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

pub fn p(store: &ParamStore, id: ParamId) -> Mat {
    let t = store.value(id);
    if t.rank() == 1 {
        vec![t.data().to_vec()]
    } else {
        rows(t)
    }
}

/// `x · w + b` with `w` stored input-major.
pub fn affine(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            (0..w[0].len())
                .map(|j| {
                    b[j] + row
                        .iter()
                        .enumerate()
                        .map(|(i, xi)| xi * w[i][j])
                        .sum::<f64>()
                })
                .collect()
        })
        .collect()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(i, v)| gain[i] * (v - mean) / (var + eps).sqrt() + bias[i])
                .collect()
        })
        .collect()
}

/// Reference attention on projected inputs: query row `r` attends to
/// key rows `win[r].0 .. win[r].0 + win[r].1`, head by head.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, heads: usize, win: &[(usize, usize)]) -> Mat {
    let d = q[0].len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![vec![0.0; d]; q.len()];
    for (r, qr) in q.iter().enumerate() {
        let (s, len) = win[r];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let scores: Vec<f64> = (s..s + len)
                .map(|j| cols.clone().map(|c| qr[c] * k[j][c]).sum::<f64>() * scale)
                .collect();
            let w = softmax(&scores);
            for (t, j) in (s..s + len).enumerate() {
                for c in cols.clone() {
                    out[r][c] += w[t] * v[j][c];
                }
            }
        }
    }
    out
}

/// Reference multi-head attention with the block's projections.
pub fn mha(
    store: &ParamStore,
    bp: &BlockParams,
    heads: usize,
    q: &Mat,
    kv: &Mat,
    win: &[(usize, usize)],
) -> Mat {
    let qp = affine(q, &p(store, bp.wq), &p(store, bp.bq)[0]);
    let kp = affine(kv, &p(store, bp.wk), &p(store, bp.bk)[0]);
    let vp = affine(kv, &p(store, bp.wv), &p(store, bp.bv)[0]);
    let ctx = attention(&qp, &kp, &vp, heads, win);
    affine(&ctx, &p(store, bp.wo), &p(store, bp.bo)[0])
}

pub fn full_windows(m: usize, n: usize) -> Vec<(usize, usize)> {
    vec![(0, n); m]
}

/// Reference post-norm block in evaluation mode.
pub fn block(
    store: &ParamStore,
    bp: &BlockParams,
    heads: usize,
    q: &Mat,
    kv: &Mat,
    win: &[(usize, usize)],
) -> Mat {
    let att = mha(store, bp, heads, q, kv, win);
    let res: Mat = q
        .iter()
        .zip(&att)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect();
    let a = layer_norm(
        &res,
        &p(store, bp.ln1_gain)[0],
        &p(store, bp.ln1_bias)[0],
        1e-5,
    );
    let h: Mat = affine(&a, &p(store, bp.ffn_w1), &p(store, bp.ffn_b1)[0])
        .into_iter()
        .map(|r| r.into_iter().map(|x| x.max(0.0)).collect())
        .collect();
    let f = affine(&h, &p(store, bp.ffn_w2), &p(store, bp.ffn_b2)[0]);
    let res: Mat = a
        .iter()
        .zip(&f)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect();
    layer_norm(
        &res,
        &p(store, bp.ln2_gain)[0],
        &p(store, bp.ln2_bias)[0],
        1e-5,
    )
}

pub fn max_pool(x: &Mat, i: usize, j: usize) -> Vec<f64> {
    (0..x[0].len())
        .map(|c| (i..j).map(|r| x[r][c]).fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

pub fn mean_pool(x: &Mat, i: usize, j: usize) -> Vec<f64> {
    (0..x[0].len())
        .map(|c| (i..j).map(|r| x[r][c]).sum::<f64>() / (j - i) as f64)
        .collect()
}

/// Randomizes every parameter (including layer-norm gains and biases) so
/// oracles are not helped by zero-initialized pieces.
pub fn perturb_all(store: &mut ParamStore, seed: u64, std: f64) {
    let mut rng = dspert_core::SplitMix64::new(seed);
    for p in store.iter_mut() {
        for x in p.value.data_mut() {
            *x += std * rng.normal();
        }
    }
}

/// Overwrites a parameter with `data`, keeping its shape.
pub fn set(store: &mut ParamStore, id: ParamId, data: &[f64]) {
    let shape = store.value(id).shape().to_vec();
    store.get_mut(id).value = Tensor::new(shape, data.to_vec()).unwrap();
}

pub fn zero(store: &mut ParamStore, id: ParamId) {
    let n = store.value(id).len();
    set(store, id, &vec![0.0; n]);
}

/// Candidates in scoring order: widths ascending, then start.
pub fn candidates(t: usize, k: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for w in 1..=k.min(t) {
        for i in 0..=t - w {
            out.push((i, i + w));
        }
    }
    out
}

/// Smoothed targets computed candidate by candidate: every candidate scans
/// all gold spans, and every gold span counts its neighbours by scanning all
/// candidates.
pub fn target_grid(
    gold: &[(usize, usize, usize)],
    t: usize,
    k: usize,
    classes: usize,
    eps: f64,
    dist: usize,
) -> Mat {
    let cands = candidates(t, k);
    let mut gold: Vec<_> = gold.iter().copied().filter(|g| g.1 - g.0 <= k).collect();
    gold.sort();
    gold.dedup();
    let distance = |a: (usize, usize), b: (usize, usize)| a.0.abs_diff(b.0) + a.1.abs_diff(b.1);
    let neighbours = |s: (usize, usize)| {
        if eps == 0.0 {
            0
        } else {
            cands
                .iter()
                .filter(|&&c| (1..=dist).contains(&distance(c, s)))
                .count()
        }
    };
    cands
        .iter()
        .map(|&c| {
            let mut row = vec![0.0; classes];
            for &(s, e, ty) in &gold {
                let n = neighbours((s, e));
                if c == (s, e) {
                    row[ty] += if n == 0 { 1.0 } else { 1.0 - eps };
                } else if n > 0 && distance(c, (s, e)) <= dist {
                    row[ty] += eps / n as f64;
                }
            }
            let entity: f64 = row[1..].iter().sum();
            if entity > 1.0 {
                row.iter_mut().skip(1).for_each(|m| *m /= entity);
            } else {
                row[0] = 1.0 - entity;
            }
            row
        })
        .collect()
}

/// Random gold set of up to `n` typed spans (no conflicting duplicates).
pub fn random_gold(
    rng: &mut dspert_core::SplitMix64,
    t: usize,
    max_width: usize,
    types: usize,
    n: usize,
) -> Vec<(usize, usize, usize)> {
    let mut gold: Vec<(usize, usize, usize)> = Vec::new();
    for _ in 0..rng.below(n + 1) {
        let s = rng.below(t);
        let e = s + 1 + rng.below(max_width.min(t - s));
        let ty = 1 + rng.below(types);
        if !gold.iter().any(|g| (g.0, g.1) == (s, e)) {
            gold.push((s, e, ty));
        }
    }
    gold
}

fn tokens_of(s: (usize, usize)) -> std::collections::BTreeSet<usize> {
    (s.0..s.1).collect()
}

/// Proper inclusion that keeps both boundary tokens of `outer` outside `inner`.
fn inside_by_sets(inner: (usize, usize), outer: (usize, usize)) -> bool {
    let (i, o) = (tokens_of(inner), tokens_of(outer));
    i.is_subset(&o) && !i.contains(&outer.0) && !i.contains(&(outer.1 - 1)) && !i.is_empty()
}

/// Nestedness computed from token sets: returns (nested, covering).
pub fn nestedness(span: (usize, usize), gold: &[(usize, usize)]) -> (bool, bool) {
    let mut nested = false;
    let mut covering = false;
    for &g in gold {
        for &a in gold {
            if inside_by_sets(a, g) {
                // g covers a gold entity; a sits inside a gold entity.
                nested |= inside_by_sets(span, g);
                covering |= inside_by_sets(a, span);
            }
        }
    }
    (nested, covering)
}

pub type Typed = (usize, usize, usize);

/// (tp, fp, fn) by linear scans over deduplicated lists.
pub fn counts(preds: &[Vec<Typed>], golds: &[Vec<Typed>]) -> (usize, usize, usize) {
    let mut c = (0, 0, 0);
    for (p, g) in preds.iter().zip(golds) {
        let mut seen_p: Vec<Typed> = Vec::new();
        for s in p {
            if !seen_p.contains(s) {
                seen_p.push(*s);
            }
        }
        let mut seen_g: Vec<Typed> = Vec::new();
        for s in g {
            if !seen_g.contains(s) {
                seen_g.push(*s);
            }
        }
        for s in &seen_p {
            if seen_g.contains(s) {
                c.0 += 1;
            } else {
                c.1 += 1;
            }
        }
        c.2 += seen_g.iter().filter(|s| !seen_p.contains(s)).count();
    }
    c
}

/// Counts restricted to spans whose `key` equals `bucket`; `key` sees the
/// sentence's gold ranges.
pub fn bucket_counts<K: PartialEq>(
    preds: &[Vec<Typed>],
    golds: &[Vec<Typed>],
    bucket: &K,
    key: impl Fn(Typed, &[(usize, usize)]) -> K,
) -> (usize, usize, usize) {
    let mut fp = Vec::new();
    let mut fg = Vec::new();
    for (p, g) in preds.iter().zip(golds) {
        let ranges: Vec<(usize, usize)> = g.iter().map(|s| (s.0, s.1)).collect();
        fp.push(
            p.iter()
                .copied()
                .filter(|&s| key(s, &ranges) == *bucket)
                .collect(),
        );
        fg.push(
            g.iter()
                .copied()
                .filter(|&s| key(s, &ranges) == *bucket)
                .collect(),
        );
    }
    counts(&fp, &fg)
}

pub fn nestedness_name(span: (usize, usize), gold: &[(usize, usize)]) -> &'static str {
    match nestedness(span, gold) {
        (true, true) => "both",
        (true, false) => "nested",
        (false, true) => "covering",
        (false, false) => "flat",
    }
}

/// Random predictions for `gold`: some kept, some retyped or shifted, plus noise.
pub fn perturb_predictions(
    rng: &mut dspert_core::SplitMix64,
    gold: &[Typed],
    t: usize,
) -> Vec<Typed> {
    let mut out = Vec::new();
    for &(s, e, ty) in gold {
        match rng.below(4) {
            0 => {}
            1 => out.push((s, e, 1 + (ty % 3))),
            2 if e < t => out.push((s, e + 1, ty)),
            _ => out.push((s, e, ty)),
        }
    }
    for _ in 0..rng.below(3) {
        let s = rng.below(t);
        out.push((s, s + 1 + rng.below(t - s), 1 + rng.below(3)));
    }
    out
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Top-`k` principal axes and variance ratios from a dense symmetric
/// eigendecomposition of the sample covariance.
pub fn dense_pca(vectors: &[Vec<f64>], k: usize) -> (Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>) {
    let n = vectors.len();
    let d = vectors[0].len();
    let x = nalgebra::DMatrix::from_fn(n, d, |i, j| vectors[i][j]);
    let mean = x.row_mean();
    let centred = nalgebra::DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centred.transpose() * &centred / (n as f64 - 1.0);
    let eig = nalgebra::SymmetricEigen::new(cov.clone());
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let trace = cov.trace();
    let axes: Vec<Vec<f64>> = order[..k]
        .iter()
        .map(|&c| eig.eigenvectors.column(c).iter().copied().collect())
        .collect();
    let ratios = order[..k]
        .iter()
        .map(|&c| eig.eigenvalues[c] / trace)
        .collect();
    let points = (0..n)
        .map(|i| {
            axes.iter()
                .map(|a| (0..d).map(|j| centred[(i, j)] * a[j]).sum())
                .collect()
        })
        .collect();
    (axes, ratios, points)
}
