//! Token encoder: embeddings plus a stack of post-norm Transformer blocks.
//! Every intermediate layer is retained because the span encoder reads
//! the layer-matched token representations.

use std::rc::Rc;

use crate::autodiff::{Graph, Var, Windows};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::rng::SplitMix64;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Token and learned absolute position tables.
#[derive(Clone, Debug)]
pub struct EmbeddingParams {
    pub token_table: ParamId,
    pub position_table: ParamId,
}

impl EmbeddingParams {
    pub fn init(
        store: &mut ParamStore,
        vocab_size: usize,
        max_len: usize,
        d: usize,
        std: f64,
        rng: &mut SplitMix64,
    ) -> Self {
        let g = ParamGroup::Pretrained;
        Self {
            token_table: store.add_normal("embeddings.token", &[vocab_size, d], std, g, rng),
            position_table: store.add_normal("embeddings.position", &[max_len, d], std, g, rng),
        }
    }
}

/// Weights of one Transformer block. Projections are stored input-major
/// (`d_in × d_out`) and applied as `x · W + b`.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

impl BlockParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        d_ff: usize,
        std: f64,
        rng: &mut SplitMix64,
    ) -> Self {
        let g = ParamGroup::Pretrained;
        let mut w = |s: &mut ParamStore, name: &str, shape: &[usize]| {
            s.add_normal(format!("{prefix}.{name}"), shape, std, g, rng)
        };
        let wq = w(store, "attn.wq", &[d, d]);
        let wk = w(store, "attn.wk", &[d, d]);
        let wv = w(store, "attn.wv", &[d, d]);
        let wo = w(store, "attn.wo", &[d, d]);
        let ffn_w1 = w(store, "ffn.w1", &[d, d_ff]);
        let ffn_w2 = w(store, "ffn.w2", &[d_ff, d]);
        let mut c =
            |name: &str, n: usize, v: f64| store.add_filled(format!("{prefix}.{name}"), &[n], v, g);
        Self {
            wq,
            bq: c("attn.bq", d, 0.0),
            wk,
            bk: c("attn.bk", d, 0.0),
            wv,
            bv: c("attn.bv", d, 0.0),
            wo,
            bo: c("attn.bo", d, 0.0),
            ln1_gain: c("ln1.gain", d, 1.0),
            ln1_bias: c("ln1.bias", d, 0.0),
            ffn_w1,
            ffn_b1: c("ffn.b1", d_ff, 0.0),
            ffn_w2,
            ffn_b2: c("ffn.b2", d, 0.0),
            ln2_gain: c("ln2.gain", d, 1.0),
            ln2_bias: c("ln2.bias", d, 0.0),
        }
    }

    pub fn ids(&self) -> [ParamId; 16] {
        [
            self.wq,
            self.bq,
            self.wk,
            self.bk,
            self.wv,
            self.bv,
            self.wo,
            self.bo,
            self.ln1_gain,
            self.ln1_bias,
            self.ffn_w1,
            self.ffn_b1,
            self.ffn_w2,
            self.ffn_b2,
            self.ln2_gain,
            self.ln2_bias,
        ]
    }
}

/// Hyperparameters shared by every block call.
#[derive(Clone, Copy, Debug)]
pub struct BlockSettings {
    pub heads: usize,
    pub dropout: f64,
}

/// Layer outputs `H⁰..H^L` of the token encoder.
#[derive(Clone, Debug)]
pub struct EncoderTrace {
    pub layers: Vec<Var>,
}

impl EncoderTrace {
    pub fn top(&self) -> Var {
        *self
            .layers
            .last()
            .expect("trace holds at least the embeddings")
    }

    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }
}

/// Every query row attends to all `n` key rows.
pub fn full_windows(m: usize, n: usize) -> Windows {
    vec![(0, n); m].into()
}

pub(crate) fn affine(g: &mut Graph<'_>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let (wv, bv) = (g.param(w), g.param(b));
    let y = g.matmul(x, wv)?;
    g.add_bias(y, bv)
}

/// `H⁰ = token_table[ids] + position_table[0..T]`, then dropout.
pub fn embed(g: &mut Graph<'_>, p: &EmbeddingParams, ids: &[usize], dropout: f64) -> Result<Var> {
    let table = g.param(p.token_table);
    let positions = g.param(p.position_table);
    let max_len = g.shape(positions)[0];
    if ids.len() > max_len {
        return Err(Error::Bounds {
            op: "embed",
            index: ids.len(),
            limit: max_len,
        });
    }
    let tok = g.embedding_lookup(table, ids)?;
    let pos = g.slice_rows(positions, 0, ids.len())?;
    let h = g.add(tok, pos)?;
    g.dropout(h, dropout)
}

/// Key/value projections of a token matrix, reusable across query sets.
#[derive(Clone, Copy, Debug)]
pub struct ProjectedKv {
    pub keys: Var,
    pub values: Var,
}

pub fn project_kv(g: &mut Graph<'_>, p: &BlockParams, k: Var, v: Var) -> Result<ProjectedKv> {
    Ok(ProjectedKv {
        keys: affine(g, k, p.wk, p.bk)?,
        values: affine(g, v, p.wv, p.bv)?,
    })
}

fn attend(
    g: &mut Graph<'_>,
    p: &BlockParams,
    heads: usize,
    q: Var,
    kv: ProjectedKv,
    windows: Windows,
) -> Result<Var> {
    let qp = affine(g, q, p.wq, p.bq)?;
    let ctx = g.window_attention(qp, kv.keys, kv.values, heads, windows)?;
    affine(g, ctx, p.wo, p.bo)
}

/// Multi-head attention; queries and keys/values may differ in row count.
pub fn multi_head_attention(
    g: &mut Graph<'_>,
    p: &BlockParams,
    heads: usize,
    q: Var,
    k: Var,
    v: Var,
) -> Result<Var> {
    let (m, n) = (g.shape(q)[0], g.shape(k)[0]);
    if m == 0 || n == 0 {
        return Err(Error::Contract("attention over an empty sequence".into()));
    }
    let kv = project_kv(g, p, k, v)?;
    attend(g, p, heads, q, kv, full_windows(m, n))
}

/// Block body against already projected keys/values:
/// `a = LN(q + MHA)`, `out = LN(a + FFN(a))`.
pub fn block_with_kv(
    g: &mut Graph<'_>,
    p: &BlockParams,
    s: BlockSettings,
    q: Var,
    kv: ProjectedKv,
    windows: Windows,
) -> Result<Var> {
    let att = attend(g, p, s.heads, q, kv, windows)?;
    let att = g.dropout(att, s.dropout)?;
    let res = g.add(q, att)?;
    let (g1, b1) = (g.param(p.ln1_gain), g.param(p.ln1_bias));
    let a = g.layer_norm(res, g1, b1, LAYER_NORM_EPS)?;

    let hidden = affine(g, a, p.ffn_w1, p.ffn_b1)?;
    let hidden = g.relu(hidden);
    let ff = affine(g, hidden, p.ffn_w2, p.ffn_b2)?;
    let ff = g.dropout(ff, s.dropout)?;
    let res = g.add(a, ff)?;
    let (g2, b2) = (g.param(p.ln2_gain), g.param(p.ln2_bias));
    g.layer_norm(res, g2, b2, LAYER_NORM_EPS)
}

/// `TrBlock(Q, K, V)` with every query attending to every key.
pub fn transformer_block(
    g: &mut Graph<'_>,
    p: &BlockParams,
    s: BlockSettings,
    q: Var,
    k: Var,
    v: Var,
) -> Result<Var> {
    let (m, n) = (g.shape(q)[0], g.shape(k)[0]);
    if m == 0 || n == 0 {
        return Err(Error::Contract("attention over an empty sequence".into()));
    }
    let kv = project_kv(g, p, k, v)?;
    block_with_kv(g, p, s, q, kv, full_windows(m, n))
}

/// Runs `H^l = TrBlock(H^{l-1}, H^{l-1}, H^{l-1})` for every block and
/// keeps all layers.
pub fn encode(
    g: &mut Graph<'_>,
    embedded: Var,
    blocks: &[BlockParams],
    s: BlockSettings,
) -> Result<EncoderTrace> {
    let mut layers = Vec::with_capacity(blocks.len() + 1);
    layers.push(embedded);
    let mut h = embedded;
    for p in blocks {
        h = transformer_block(g, p, s, h, h, h)?;
        layers.push(h);
    }
    Ok(EncoderTrace { layers })
}

/// Windows for stacked span queries: row `(k, i)` attends to tokens
/// `i..i + k`, widths in the given order.
pub fn span_windows(widths: &[usize], len: usize) -> Windows {
    let rows: Vec<(usize, usize)> = widths
        .iter()
        .flat_map(|&k| (0..(len + 1).saturating_sub(k)).map(move |i| (i, k)))
        .collect();
    Rc::from(rows)
}
