//! Span Transformer encoder.
//!
//! For every width `k ∈ 2..=K` the initial span representations are
//! aggregated from token layer `L − L̃`; each of the following `L̃` span
//! blocks uses the previous span representations as queries and the
//! layer-matched token slice `H^{l−1}[i..i+k]` as keys and values.
//! All widths are stacked into one query matrix per layer, so one block
//! call serves every width. Width-1 spans reuse the top token layer.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoder::{self, BlockParams, BlockSettings, EncoderTrace};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// Shallow aggregating function used to seed span representations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Max,
    Mean,
    MulAttention,
    AddAttention,
}

impl Aggregation {
    pub const ALL: [Aggregation; 4] = [
        Aggregation::Max,
        Aggregation::Mean,
        Aggregation::MulAttention,
        Aggregation::AddAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Aggregation::Max => "max",
            Aggregation::Mean => "mean",
            Aggregation::MulAttention => "mul_attention",
            Aggregation::AddAttention => "add_attention",
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Aggregation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown aggregation `{s}`")))
    }
}

/// Learnable pieces of an aggregator. Pooling kinds own nothing; the
/// attention kinds own one set shared across widths.
///
/// Multiplicative: `softmax(uᵀ tanh(W Hᵀ)) H`.
/// Additive: `softmax(uᵀ tanh(W (H ⊕ v)ᵀ)) H` with `v` repeated per token.
#[derive(Clone, Debug)]
pub struct AggregatorParams {
    pub kind: Aggregation,
    pub w: Option<ParamId>,
    pub u: Option<ParamId>,
    pub v: Option<ParamId>,
}

impl AggregatorParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        kind: Aggregation,
        d: usize,
        rng: &mut SplitMix64,
    ) -> Self {
        let g = ParamGroup::Fresh;
        let std = 1.0 / (d as f64).sqrt();
        let (w, u, v) = match kind {
            Aggregation::Max | Aggregation::Mean => (None, None, None),
            Aggregation::MulAttention => (
                Some(store.add_normal(format!("{prefix}.w"), &[d, d], std, g, rng)),
                Some(store.add_normal(format!("{prefix}.u"), &[d, 1], std, g, rng)),
                None,
            ),
            Aggregation::AddAttention => (
                Some(store.add_normal(format!("{prefix}.w"), &[2 * d, d], std, g, rng)),
                Some(store.add_normal(format!("{prefix}.u"), &[d, 1], std, g, rng)),
                Some(store.add_normal(format!("{prefix}.v"), &[d], std, g, rng)),
            ),
        };
        Self { kind, w, u, v }
    }

    /// Pooling-only aggregator, no parameters.
    pub fn pooling(kind: Aggregation) -> Result<Self> {
        match kind {
            Aggregation::Max | Aggregation::Mean => Ok(Self {
                kind,
                w: None,
                u: None,
                v: None,
            }),
            _ => Err(Error::Config(format!("{kind} needs learnable parameters"))),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [self.w, self.u, self.v].into_iter().flatten().collect()
    }
}

/// Per-token attention scores (`T × 1`); `None` for pooling kinds.
fn token_scores(g: &mut Graph<'_>, agg: &AggregatorParams, h: Var) -> Result<Option<Var>> {
    let missing = || Error::Contract(format!("{} aggregator without parameters", agg.kind));
    let input = match agg.kind {
        Aggregation::Max | Aggregation::Mean => return Ok(None),
        Aggregation::MulAttention => h,
        Aggregation::AddAttention => {
            let v = g.param(agg.v.ok_or_else(missing)?);
            let rows = g.shape(h)[0];
            let rep = g.repeat_rows(v, rows);
            g.concat_cols(&[h, rep])?
        }
    };
    let w = g.param(agg.w.ok_or_else(missing)?);
    let u = g.param(agg.u.ok_or_else(missing)?);
    let proj = g.matmul(input, w)?;
    let act = g.tanh(proj);
    Ok(Some(g.matmul(act, u)?))
}

fn pool(
    g: &mut Graph<'_>,
    kind: Aggregation,
    scores: Option<Var>,
    h: Var,
    k: usize,
) -> Result<Var> {
    match (kind, scores) {
        (Aggregation::Max, _) => g.window_max(h, k),
        (Aggregation::Mean, _) => g.window_mean(h, k),
        (_, Some(s)) => g.window_softmax_pool(s, h, k),
        (_, None) => Err(Error::Contract("attention pooling without scores".into())),
    }
}

/// Aggregates every width in `widths` from the same token layer; attention
/// scores are computed once and shared. Widths larger than `T` yield
/// zero-row matrices.
pub fn aggregate_widths(
    g: &mut Graph<'_>,
    agg: &AggregatorParams,
    h: Var,
    widths: &[usize],
) -> Result<Vec<Var>> {
    let scores = token_scores(g, agg, h)?;
    widths
        .iter()
        .map(|&k| pool(g, agg.kind, scores, h, k))
        .collect()
}

/// Row `i` of the result aggregates `h[i..i + k]`.
pub fn init_aggregate(
    g: &mut Graph<'_>,
    agg: &AggregatorParams,
    h: Var,
    k: usize,
    max_span: usize,
) -> Result<Var> {
    let t = g.shape(h)[0];
    if k < 2 || k > max_span.min(t) {
        return Err(Error::Contract(format!(
            "initial aggregation width {k} outside 2..={}",
            max_span.min(t)
        )));
    }
    Ok(aggregate_widths(g, agg, h, &[k])?.remove(0))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanEncoderConfig {
    /// Maximum span width `K`.
    pub max_span: usize,
    /// Number of span blocks `L̃`.
    pub depth: usize,
    pub aggregation: Aggregation,
    /// Reuse the token blocks' weights in the span blocks.
    pub share_weights: bool,
    /// One block parameter set per (layer, width) instead of per layer.
    pub per_width_params: bool,
}

impl SpanEncoderConfig {
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.max_span < 2 {
            return Err(Error::Config(format!(
                "maximum span size must be at least 2, got {}",
                self.max_span
            )));
        }
        if self.depth > num_layers {
            return Err(Error::Config(format!(
                "span depth {} exceeds the {num_layers} token layers",
                self.depth
            )));
        }
        if self.share_weights && self.per_width_params {
            return Err(Error::Config(
                "shared token weights cannot also be split per width".into(),
            ));
        }
        Ok(())
    }

    /// Token layer the initial aggregation reads from.
    pub fn start_layer(&self, num_layers: usize) -> usize {
        num_layers - self.depth
    }
}

/// Parameters of the span side: the initial aggregator and, unless weights
/// are shared with the token encoder, the span blocks.
#[derive(Clone, Debug)]
pub struct SpanEncoder {
    pub cfg: SpanEncoderConfig,
    pub aggregator: AggregatorParams,
    /// `blocks[layer][slot]`; one slot unless `per_width_params`, in which
    /// case slot `k − 2` serves width `k`. Empty when sharing weights.
    pub blocks: Vec<Vec<BlockParams>>,
}

impl SpanEncoder {
    pub fn init(
        store: &mut ParamStore,
        cfg: SpanEncoderConfig,
        num_layers: usize,
        d: usize,
        d_ff: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        cfg.validate(num_layers)?;
        let aggregator = AggregatorParams::init(store, "span.aggregator", cfg.aggregation, d, rng);
        let slots = if cfg.per_width_params {
            cfg.max_span - 1
        } else {
            1
        };
        let blocks = if cfg.share_weights {
            Vec::new()
        } else {
            (0..cfg.depth)
                .map(|l| {
                    (0..slots)
                        .map(|s| {
                            let prefix = if cfg.per_width_params {
                                format!("span.block{l}.width{}", s + 2)
                            } else {
                                format!("span.block{l}")
                            };
                            BlockParams::init(store, &prefix, d, d_ff, 0.02, rng)
                        })
                        .collect()
                })
                .collect()
        };
        Ok(Self {
            cfg,
            aggregator,
            blocks,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.aggregator.ids();
        for layer in &self.blocks {
            for b in layer {
                ids.extend(b.ids());
            }
        }
        ids
    }

    fn block_for<'a>(
        &'a self,
        token_blocks: &'a [BlockParams],
        span_layer: usize,
        width: usize,
    ) -> Result<&'a BlockParams> {
        if self.cfg.share_weights {
            let start = token_blocks.len() - self.cfg.depth;
            return token_blocks
                .get(start + span_layer)
                .ok_or_else(|| Error::Contract("missing token block to share".into()));
        }
        let slot = if self.cfg.per_width_params {
            width - 2
        } else {
            0
        };
        self.blocks
            .get(span_layer)
            .and_then(|l| l.get(slot))
            .ok_or_else(|| Error::Contract(format!("no span block for layer {span_layer}")))
    }

    pub fn encode(
        &self,
        g: &mut Graph<'_>,
        trace: &EncoderTrace,
        token_blocks: &[BlockParams],
        settings: BlockSettings,
    ) -> Result<SpanTrace> {
        encode_spans(g, trace, self, token_blocks, settings)
    }
}

/// Span representations of every width at every span layer, stored as one
/// stacked matrix per layer with per-width row offsets.
#[derive(Clone, Debug)]
pub struct SpanTrace {
    pub seq_len: usize,
    pub max_span: usize,
    pub start_layer: usize,
    /// Widths present in the stack: `2..=min(K, T)`.
    pub widths: Vec<usize>,
    /// First stacked row of each entry of `widths`.
    pub offsets: Vec<usize>,
    /// Stacked `S^{l}` for `l = start_layer..=L`.
    pub layers: Vec<Var>,
}

impl SpanTrace {
    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn top(&self) -> Var {
        *self.layers.last().expect("span trace has an initial layer")
    }

    /// Stacked row count: `Σ_{k=2..min(K,T)} (T − k + 1)`.
    pub fn stacked_rows(&self) -> usize {
        self.widths.iter().map(|&k| self.seq_len + 1 - k).sum()
    }

    /// Row range of width `k` inside a stacked layer (empty when `k > T`).
    pub fn rows_of(&self, k: usize) -> Option<(usize, usize)> {
        if k < 2 || k > self.max_span {
            return None;
        }
        match self.widths.iter().position(|&w| w == k) {
            Some(p) => Some((self.offsets[p], self.offsets[p] + self.seq_len + 1 - k)),
            None => Some((self.stacked_rows(), self.stacked_rows())),
        }
    }

    /// `S^{l,k}` sliced out of the stack; `layer` counts from `start_layer`.
    pub fn width_layer(&self, g: &mut Graph<'_>, k: usize, layer: usize) -> Result<Var> {
        let (a, b) = self.rows_of(k).ok_or(Error::UnsupportedSpan {
            start: 0,
            end: k,
            max: self.max_span,
        })?;
        let stacked = *self.layers.get(layer).ok_or(Error::Bounds {
            op: "span_layer",
            index: layer,
            limit: self.layers.len(),
        })?;
        g.slice_rows(stacked, a, b)
    }

    /// Every entry `S^{start..L, k}` of width `k`.
    pub fn width_stack(&self, g: &mut Graph<'_>, k: usize) -> Result<Vec<Var>> {
        (0..self.layers.len())
            .map(|l| self.width_layer(g, k, l))
            .collect()
    }
}

/// Candidate spans ordered as the model scores them: widths `1..=min(K, T)`,
/// then start position.
pub fn candidate_spans(seq_len: usize, max_span: usize) -> Vec<(usize, usize)> {
    (1..=max_span.min(seq_len))
        .flat_map(|k| (0..=seq_len - k).map(move |i| (i, i + k)))
        .collect()
}

pub fn candidate_count(seq_len: usize, max_span: usize) -> usize {
    (1..=max_span.min(seq_len)).map(|k| seq_len + 1 - k).sum()
}

/// One span block: query `s_prev` against the token slice as keys/values.
pub fn span_block(
    g: &mut Graph<'_>,
    p: &BlockParams,
    settings: BlockSettings,
    s_prev: Var,
    token_slice: Var,
) -> Result<Var> {
    encoder::transformer_block(g, p, settings, s_prev, token_slice, token_slice)
}

fn zero_rows(g: &mut Graph<'_>, d: usize) -> Var {
    g.constant(Tensor::zeros(&[0, d]))
}

/// Builds `S^{l,k}` for all widths and span layers.
pub fn encode_spans(
    g: &mut Graph<'_>,
    trace: &EncoderTrace,
    enc: &SpanEncoder,
    token_blocks: &[BlockParams],
    settings: BlockSettings,
) -> Result<SpanTrace> {
    let num_layers = trace.depth();
    if token_blocks.len() != num_layers {
        return Err(Error::Contract(format!(
            "{} token blocks for a trace of depth {num_layers}",
            token_blocks.len()
        )));
    }
    let cfg = &enc.cfg;
    cfg.validate(num_layers)?;
    let start = cfg.start_layer(num_layers);
    let h0 = trace.layers[start];
    let (seq_len, d) = (g.shape(h0)[0], g.shape(h0)[1]);
    let widths: Vec<usize> = (2..=cfg.max_span.min(seq_len)).collect();
    let mut offsets = Vec::with_capacity(widths.len());
    let mut acc = 0;
    for &k in &widths {
        offsets.push(acc);
        acc += seq_len + 1 - k;
    }

    let mut layers = Vec::with_capacity(cfg.depth + 1);
    let initial = if widths.is_empty() {
        zero_rows(g, d)
    } else {
        let parts = aggregate_widths(g, &enc.aggregator, h0, &widths)?;
        g.concat_rows(&parts)?
    };
    layers.push(initial);

    for span_layer in 0..cfg.depth {
        let prev = *layers.last().expect("initial layer present");
        let tokens = trace.layers[start + span_layer];
        let next = if widths.is_empty() {
            zero_rows(g, d)
        } else if cfg.per_width_params {
            let mut parts = Vec::with_capacity(widths.len());
            for (w, &k) in widths.iter().enumerate() {
                let p = enc.block_for(token_blocks, span_layer, k)?;
                let rows = seq_len + 1 - k;
                let q = g.slice_rows(prev, offsets[w], offsets[w] + rows)?;
                let kv = encoder::project_kv(g, p, tokens, tokens)?;
                let win = encoder::span_windows(&[k], seq_len);
                parts.push(encoder::block_with_kv(g, p, settings, q, kv, win)?);
            }
            g.concat_rows(&parts)?
        } else {
            let p = enc.block_for(token_blocks, span_layer, 2)?;
            let kv = encoder::project_kv(g, p, tokens, tokens)?;
            let win = encoder::span_windows(&widths, seq_len);
            encoder::block_with_kv(g, p, settings, prev, kv, win)?
        };
        layers.push(next);
    }

    Ok(SpanTrace {
        seq_len,
        max_span: cfg.max_span,
        start_layer: start,
        widths,
        offsets,
        layers,
    })
}

/// Representation of span `(i, j)`: the top token row for width 1,
/// otherwise row `i` of `S^{L, j−i}`. Returned as a `1 × d` matrix.
pub fn span_representation(
    g: &mut Graph<'_>,
    trace: &EncoderTrace,
    spans: &SpanTrace,
    i: usize,
    j: usize,
) -> Result<Var> {
    if i >= j {
        return Err(Error::Contract(format!("empty span ({i}, {j})")));
    }
    if j > spans.seq_len {
        return Err(Error::Bounds {
            op: "span_representation",
            index: j,
            limit: spans.seq_len,
        });
    }
    let k = j - i;
    if k > spans.max_span {
        return Err(Error::UnsupportedSpan {
            start: i,
            end: j,
            max: spans.max_span,
        });
    }
    if k == 1 {
        return g.slice_rows(trace.top(), i, j);
    }
    let (a, _) = spans.rows_of(k).expect("width checked above");
    g.slice_rows(spans.top(), a + i, a + i + 1)
}
