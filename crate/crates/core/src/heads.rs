//! Classification heads and shallow baselines.

use crate::autodiff::{Graph, Var};
use crate::encoder::affine;
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::rng::SplitMix64;
use crate::span::{self, AggregatorParams};

/// Width embedding, dimension-reducing FFN and the final softmax layer.
/// Row 0 of `w` is the non-entity class.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub width_table: ParamId,
    /// `(weight, bias)` per FFN layer; the first maps `d + d_w → d_z`.
    pub ffn: Vec<(ParamId, ParamId)>,
    pub w: ParamId,
    pub b: ParamId,
    pub max_span: usize,
    pub dropout: f64,
}

impl ClassifierHead {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        d: usize,
        d_w: usize,
        d_z: usize,
        ffn_layers: usize,
        classes: usize,
        max_span: usize,
        dropout: f64,
        rng: &mut SplitMix64,
    ) -> Self {
        let g = ParamGroup::Fresh;
        let width_table = store.add_normal("head.width_table", &[max_span, d_w], 0.02, g, rng);
        let mut ffn = Vec::with_capacity(ffn_layers);
        let mut input = d + d_w;
        for l in 0..ffn_layers {
            let std = (2.0 / input as f64).sqrt();
            let w = store.add_normal(format!("head.ffn{l}.w"), &[input, d_z], std, g, rng);
            let b = store.add_filled(format!("head.ffn{l}.b"), &[d_z], 0.0, g);
            ffn.push((w, b));
            input = d_z;
        }
        let std = (1.0 / input as f64).sqrt();
        let w = store.add_normal("head.out.w", &[classes, input], std, g, rng);
        let b = store.add_filled("head.out.b", &[classes], 0.0, g);
        Self {
            width_table,
            ffn,
            w,
            b,
            max_span,
            dropout,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.width_table];
        for &(w, b) in &self.ffn {
            ids.extend([w, b]);
        }
        ids.extend([self.w, self.b]);
        ids
    }
}

/// Output of the classifier for a batch of spans.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub logits: Var,
    /// Pre-logit representations `z`; absent for the biaffine head.
    pub prelogits: Option<Var>,
}

/// Batched classification: `reps` is `n × d`, `widths[r]` the width of row
/// `r`. Returns logits `Wz + b` and `z`.
pub fn classify(
    g: &mut Graph<'_>,
    head: &ClassifierHead,
    reps: Var,
    widths: &[usize],
) -> Result<HeadOutput> {
    if let Some(&bad) = widths.iter().find(|&&k| k == 0 || k > head.max_span) {
        return Err(Error::Contract(format!(
            "span width {bad} outside 1..={}",
            head.max_span
        )));
    }
    let table = g.param(head.width_table);
    let idx: Vec<usize> = widths.iter().map(|k| k - 1).collect();
    let wemb = g.gather_rows(table, &idx)?;
    let mut z = g.concat_cols(&[reps, wemb])?;
    for &(w, b) in &head.ffn {
        let y = affine(g, z, w, b)?;
        let y = g.relu(y);
        z = g.dropout(y, head.dropout)?;
    }
    let w = g.param(head.w);
    let wt = g.transpose(w)?;
    let b = g.param(head.b);
    let logits = g.matmul(z, wt)?;
    let logits = g.add_bias(logits, b)?;
    Ok(HeadOutput {
        logits,
        prelogits: Some(z),
    })
}

/// Single span: `(probs, prelogit)` as `1 × c` and `1 × d_z`.
pub fn classify_span(
    g: &mut Graph<'_>,
    head: &ClassifierHead,
    s: Var,
    width: usize,
) -> Result<(Var, Var)> {
    // A bare vector becomes a single-row matrix.
    let s = if g.shape(s).len() == 1 {
        g.repeat_rows(s, 1)
    } else {
        s
    };
    let out = classify(g, head, s, &[width])?;
    let probs = g.softmax(out.logits, 1)?;
    Ok((probs, out.prelogits.expect("classifier exposes z")))
}

/// Single-layer bidirectional LSTM followed by a projection back to `d`.
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub hidden: usize,
    /// Input-to-gates `[d, 4H]`, hidden-to-gates `[H, 4H]`, bias `[4H]`;
    /// gate order input, forget, cell, output.
    pub fwd: LstmParams,
    pub bwd: LstmParams,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub dropout: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
}

impl BiLstm {
    pub fn init(
        store: &mut ParamStore,
        d: usize,
        hidden: usize,
        dropout: f64,
        rng: &mut SplitMix64,
    ) -> Self {
        let g = ParamGroup::Fresh;
        let std = 1.0 / (hidden as f64).sqrt();
        let mut dir = |s: &mut ParamStore, name: &str| LstmParams {
            wx: s.add_normal(format!("bilstm.{name}.wx"), &[d, 4 * hidden], std, g, rng),
            wh: s.add_normal(
                format!("bilstm.{name}.wh"),
                &[hidden, 4 * hidden],
                std,
                g,
                rng,
            ),
            b: s.add_filled(format!("bilstm.{name}.b"), &[4 * hidden], 0.0, g),
        };
        let fwd = dir(store, "fwd");
        let bwd = dir(store, "bwd");
        let pstd = (1.0 / (2 * hidden) as f64).sqrt();
        let proj_w = store.add_normal("bilstm.proj.w", &[2 * hidden, d], pstd, g, rng);
        let proj_b = store.add_filled("bilstm.proj.b", &[d], 0.0, g);
        Self {
            hidden,
            fwd,
            bwd,
            proj_w,
            proj_b,
            dropout,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![
            self.fwd.wx,
            self.fwd.wh,
            self.fwd.b,
            self.bwd.wx,
            self.bwd.wh,
            self.bwd.b,
            self.proj_w,
            self.proj_b,
        ]
    }
}

fn lstm_direction(
    g: &mut Graph<'_>,
    p: LstmParams,
    hidden: usize,
    x: Var,
    reverse: bool,
) -> Result<Vec<Var>> {
    let n = g.shape(x)[0];
    let gates_x = affine(g, x, p.wx, p.b)?;
    let wh = g.param(p.wh);
    let mut h: Option<Var> = None;
    let mut c: Option<Var> = None;
    let mut out = vec![None; n];
    let order: Vec<usize> = if reverse {
        (0..n).rev().collect()
    } else {
        (0..n).collect()
    };
    for t in order {
        let mut gates = g.slice_rows(gates_x, t, t + 1)?;
        if let Some(hp) = h {
            let rec = g.matmul(hp, wh)?;
            gates = g.add(gates, rec)?;
        }
        let i = g.slice_cols(gates, 0, hidden)?;
        let f = g.slice_cols(gates, hidden, 2 * hidden)?;
        let cc = g.slice_cols(gates, 2 * hidden, 3 * hidden)?;
        let o = g.slice_cols(gates, 3 * hidden, 4 * hidden)?;
        let (i, f, cc, o) = (g.sigmoid(i), g.sigmoid(f), g.tanh(cc), g.sigmoid(o));
        let ic = g.mul(i, cc)?;
        let cn = match c {
            Some(cp) => {
                let fc = g.mul(f, cp)?;
                g.add(fc, ic)?
            }
            None => ic,
        };
        let tc = g.tanh(cn);
        let hn = g.mul(o, tc)?;
        out[t] = Some(hn);
        h = Some(hn);
        c = Some(cn);
    }
    Ok(out
        .into_iter()
        .map(|v| v.expect("every step visited"))
        .collect())
}

/// Runs the BiLSTM along one sequence of span representations (`n × d`)
/// and returns the projected `n × d` result. Empty sequences pass through.
pub fn bilstm_sequence(g: &mut Graph<'_>, lstm: &BiLstm, x: Var) -> Result<Var> {
    if g.shape(x)[0] == 0 {
        return Ok(x);
    }
    let f = lstm_direction(g, lstm.fwd, lstm.hidden, x, false)?;
    let b = lstm_direction(g, lstm.bwd, lstm.hidden, x, true)?;
    let fm = g.concat_rows(&f)?;
    let bm = g.concat_rows(&b)?;
    let both = g.concat_cols(&[fm, bm])?;
    let y = affine(g, both, lstm.proj_w, lstm.proj_b)?;
    g.dropout(y, lstm.dropout)
}

/// Refines each width's sequence independently with one shared BiLSTM.
/// `None` leaves the inputs untouched.
pub fn bilstm_refine(
    g: &mut Graph<'_>,
    lstm: Option<&BiLstm>,
    by_width: &[Var],
) -> Result<Vec<Var>> {
    match lstm {
        None => Ok(by_width.to_vec()),
        Some(l) => by_width.iter().map(|&x| bilstm_sequence(g, l, x)).collect(),
    }
}

/// Span `(i, j)` of `h_top` aggregated in one step; a `1 × d` matrix.
pub fn shallow_aggregate(
    g: &mut Graph<'_>,
    agg: &AggregatorParams,
    h_top: Var,
    i: usize,
    j: usize,
) -> Result<Var> {
    let t = g.shape(h_top)[0];
    if i >= j || j > t {
        return Err(Error::Contract(format!("span ({i}, {j}) outside 0..{t}")));
    }
    let slice = g.slice_rows(h_top, i, j)?;
    Ok(span::aggregate_widths(g, agg, slice, &[j - i])?.remove(0))
}

/// Start/end projections and biaffine scorer.
#[derive(Clone, Debug)]
pub struct BiaffineHead {
    pub start_w: ParamId,
    pub start_b: ParamId,
    pub end_w: ParamId,
    pub end_b: ParamId,
    /// `[d_b, c, d_b]`.
    pub u: ParamId,
    /// `[c, 2 d_b]`.
    pub w_add: ParamId,
    pub b: ParamId,
    pub use_production: bool,
}

impl BiaffineHead {
    pub fn init(
        store: &mut ParamStore,
        d: usize,
        d_b: usize,
        classes: usize,
        use_production: bool,
        rng: &mut SplitMix64,
    ) -> Self {
        let g = ParamGroup::Fresh;
        let pstd = (2.0 / d as f64).sqrt();
        let bstd = (1.0 / d_b as f64).sqrt();
        Self {
            start_w: store.add_normal("biaffine.start.w", &[d, d_b], pstd, g, rng),
            start_b: store.add_filled("biaffine.start.b", &[d_b], 0.0, g),
            end_w: store.add_normal("biaffine.end.w", &[d, d_b], pstd, g, rng),
            end_b: store.add_filled("biaffine.end.b", &[d_b], 0.0, g),
            u: store.add_normal("biaffine.u", &[d_b, classes, d_b], bstd, g, rng),
            w_add: store.add_normal("biaffine.w_add", &[classes, 2 * d_b], bstd, g, rng),
            b: store.add_filled("biaffine.b", &[classes], 0.0, g),
            use_production,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![
            self.start_w,
            self.start_b,
            self.end_w,
            self.end_b,
            self.u,
            self.w_add,
            self.b,
        ]
    }
}

/// `r = h_sᵀ U h_e + W_add (h_s ⊕ h_e) + b` row-wise over `n × d_b` inputs;
/// the production term is skipped when disabled.
pub fn biaffine_logits(g: &mut Graph<'_>, head: &BiaffineHead, hs: Var, he: Var) -> Result<Var> {
    let both = g.concat_cols(&[hs, he])?;
    let w = g.param(head.w_add);
    let wt = g.transpose(w)?;
    let add = g.matmul(both, wt)?;
    let b = g.param(head.b);
    let mut r = g.add_bias(add, b)?;
    if head.use_production {
        let u = g.param(head.u);
        let prod = g.bilinear(hs, u, he)?;
        r = g.add(r, prod)?;
    }
    Ok(r)
}

/// Biaffine logits for the given `(start, end)` spans over top tokens `h`.
pub fn biaffine_spans(
    g: &mut Graph<'_>,
    head: &BiaffineHead,
    h: Var,
    spans: &[(usize, usize)],
) -> Result<HeadOutput> {
    let hs_all = affine(g, h, head.start_w, head.start_b)?;
    let hs_all = g.relu(hs_all);
    let he_all = affine(g, h, head.end_w, head.end_b)?;
    let he_all = g.relu(he_all);
    let starts: Vec<usize> = spans.iter().map(|s| s.0).collect();
    let ends: Vec<usize> = spans.iter().map(|s| s.1 - 1).collect();
    let hs = g.gather_rows(hs_all, &starts)?;
    let he = g.gather_rows(he_all, &ends)?;
    Ok(HeadOutput {
        logits: biaffine_logits(g, head, hs, he)?,
        prelogits: None,
    })
}
