//! The full span classifier: token encoder, span representations, head.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoder::{self, BlockParams, BlockSettings, EmbeddingParams, EncoderTrace};
use crate::error::{Error, Result};
use crate::heads::{self, BiLstm, BiaffineHead, ClassifierHead, HeadOutput};
use crate::params::{ParamId, ParamStore};
use crate::rng::SplitMix64;
use crate::span::{self, Aggregation, AggregatorParams, SpanEncoder, SpanEncoderConfig};

/// Which span representation and decoder the model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    Dspert,
    ShallowMax,
    ShallowMean,
    ShallowMulattn,
    ShallowAddattn,
    Biaffine,
    BiaffineNoProd,
}

impl HeadKind {
    pub const ALL: [HeadKind; 7] = [
        HeadKind::Dspert,
        HeadKind::ShallowMax,
        HeadKind::ShallowMean,
        HeadKind::ShallowMulattn,
        HeadKind::ShallowAddattn,
        HeadKind::Biaffine,
        HeadKind::BiaffineNoProd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Dspert => "dspert",
            HeadKind::ShallowMax => "shallow-max",
            HeadKind::ShallowMean => "shallow-mean",
            HeadKind::ShallowMulattn => "shallow-mulattn",
            HeadKind::ShallowAddattn => "shallow-addattn",
            HeadKind::Biaffine => "biaffine",
            HeadKind::BiaffineNoProd => "biaffine-no-prod",
        }
    }

    /// Aggregation used by a shallow head.
    pub fn shallow_aggregation(self) -> Option<Aggregation> {
        match self {
            HeadKind::ShallowMax => Some(Aggregation::Max),
            HeadKind::ShallowMean => Some(Aggregation::Mean),
            HeadKind::ShallowMulattn => Some(Aggregation::MulAttention),
            HeadKind::ShallowAddattn => Some(Aggregation::AddAttention),
            _ => None,
        }
    }

    pub fn is_biaffine(self) -> bool {
        matches!(self, HeadKind::Biaffine | HeadKind::BiaffineNoProd)
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HeadKind::ALL
            .into_iter()
            .find(|h| h.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown head kind `{s}`")))
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Longest accepted sentence (`T_max`).
    pub max_len: usize,
    /// Entity types, excluding the non-entity class.
    pub num_types: usize,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_inner: usize,
    pub encoder_dropout: f64,
    pub head: HeadKind,
    pub max_span: usize,
    pub span_depth: usize,
    pub aggregation: Aggregation,
    pub share_weights: bool,
    pub per_width_params: bool,
    pub use_bilstm: bool,
    pub lstm_hidden: usize,
    pub lstm_dropout: f64,
    pub width_dim: usize,
    pub ffn_hidden: usize,
    pub ffn_layers: usize,
    pub ffn_dropout: f64,
    pub biaffine_dim: usize,
}

impl ModelConfig {
    /// Small configuration with the given vocabulary and type counts.
    pub fn toy(vocab_size: usize, num_types: usize) -> Self {
        Self {
            vocab_size,
            max_len: 64,
            num_types,
            layers: 2,
            hidden: 32,
            heads: 2,
            ffn_inner: 128,
            encoder_dropout: 0.1,
            head: HeadKind::Dspert,
            max_span: 6,
            span_depth: 2,
            aggregation: Aggregation::Max,
            share_weights: false,
            per_width_params: false,
            use_bilstm: true,
            lstm_hidden: 32,
            lstm_dropout: 0.5,
            width_dim: 16,
            ffn_hidden: 32,
            ffn_layers: 1,
            ffn_dropout: 0.4,
            biaffine_dim: 32,
        }
    }

    /// Classes including non-entity (index 0).
    pub fn classes(&self) -> usize {
        self.num_types + 1
    }

    pub fn span_config(&self) -> SpanEncoderConfig {
        SpanEncoderConfig {
            max_span: self.max_span,
            depth: self.span_depth,
            aggregation: self.aggregation,
            share_weights: self.share_weights,
            per_width_params: self.per_width_params,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
            ("num_types", self.num_types),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ffn_inner", self.ffn_inner),
            ("width_dim", self.width_dim),
            ("ffn_hidden_size", self.ffn_hidden),
            ("lstm_hidden_size", self.lstm_hidden),
            ("biaffine_dim", self.biaffine_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        for (name, p) in [
            ("encoder dropout", self.encoder_dropout),
            ("lstm dropout", self.lstm_dropout),
            ("ffn dropout", self.ffn_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} outside [0, 1)")));
            }
        }
        self.span_config().validate(self.layers)?;
        if self.head != HeadKind::Dspert
            && (self.span_depth != 0 || self.share_weights || self.per_width_params)
        {
            return Err(Error::Config(format!(
                "head `{}` does not use the span encoder; span depth, weight sharing \
                     and per-width blocks must be off",
                self.head
            )));
        }
        if self.head.is_biaffine() && self.use_bilstm {
            return Err(Error::Config(format!(
                "head `{}` takes no BiLSTM",
                self.head
            )));
        }
        if self.ffn_layers == 0 && !self.head.is_biaffine() {
            return Err(Error::Config(
                "the classifier needs at least one FFN layer".into(),
            ));
        }
        Ok(())
    }

    pub fn block_settings(&self) -> BlockSettings {
        BlockSettings {
            heads: self.heads,
            dropout: self.encoder_dropout,
        }
    }
}

/// Scores of every candidate span of one sentence.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Candidates in scoring order: widths ascending, then start.
    pub spans: Vec<(usize, usize)>,
    pub logits: Var,
    pub prelogits: Option<Var>,
}

/// One classified candidate span.
#[derive(Clone, Debug, PartialEq)]
pub struct SpanPrediction {
    pub start: usize,
    pub end: usize,
    pub type_index: usize,
    pub probs: Vec<f64>,
    /// `z`; absent for the biaffine head.
    pub prelogit: Option<Vec<f64>>,
}

impl SpanPrediction {
    pub fn is_entity(&self) -> bool {
        self.type_index != 0
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embeddings: EmbeddingParams,
    pub blocks: Vec<BlockParams>,
    pub span_encoder: Option<SpanEncoder>,
    pub shallow: Option<AggregatorParams>,
    pub bilstm: Option<BiLstm>,
    pub classifier: Option<ClassifierHead>,
    pub biaffine: Option<BiaffineHead>,
}

impl Model {
    /// Randomly initialized model; parameter names and creation order are
    /// a pure function of the configuration.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::new(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let embeddings = EmbeddingParams::init(
            &mut store,
            c.vocab_size,
            c.max_len,
            c.hidden,
            0.02,
            &mut rng,
        );
        let blocks: Vec<BlockParams> = (0..c.layers)
            .map(|l| {
                BlockParams::init(
                    &mut store,
                    &format!("encoder.block{l}"),
                    c.hidden,
                    c.ffn_inner,
                    0.02,
                    &mut rng,
                )
            })
            .collect();
        let span_encoder = match c.head {
            HeadKind::Dspert => Some(SpanEncoder::init(
                &mut store,
                c.span_config(),
                c.layers,
                c.hidden,
                c.ffn_inner,
                &mut rng,
            )?),
            _ => None,
        };
        if let Some(enc) = &span_encoder {
            // Span blocks start from the weights of the token block at the
            // same layer, as both would when loaded from one pretrained
            // encoder; they are trained independently afterwards.
            let start = enc.cfg.start_layer(c.layers);
            for (l, slots) in enc.blocks.iter().enumerate() {
                let token: &BlockParams = &blocks[start + l];
                for span_block in slots {
                    for (from, to) in token.ids().into_iter().zip(span_block.ids()) {
                        let value = store.value(from).clone();
                        store.get_mut(to).value = value;
                    }
                }
            }
        }
        let shallow = c.head.shallow_aggregation().map(|kind| {
            AggregatorParams::init(&mut store, "shallow.aggregator", kind, c.hidden, &mut rng)
        });
        let bilstm = c.use_bilstm.then(|| {
            BiLstm::init(
                &mut store,
                c.hidden,
                c.lstm_hidden,
                c.lstm_dropout,
                &mut rng,
            )
        });
        let (classifier, biaffine) = if c.head.is_biaffine() {
            let use_prod = c.head == HeadKind::Biaffine;
            let head = BiaffineHead::init(
                &mut store,
                c.hidden,
                c.biaffine_dim,
                c.classes(),
                use_prod,
                &mut rng,
            );
            (None, Some(head))
        } else {
            let head = ClassifierHead::init(
                &mut store,
                c.hidden,
                c.width_dim,
                c.ffn_hidden,
                c.ffn_layers,
                c.classes(),
                c.max_span,
                c.ffn_dropout,
                &mut rng,
            );
            (Some(head), None)
        };
        Ok(Self {
            config,
            store,
            embeddings,
            blocks,
            span_encoder,
            shallow,
            bilstm,
            classifier,
            biaffine,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.store.iter().map(|(id, _)| id).collect()
    }

    /// Token encoder only.
    pub fn encode_tokens(&self, g: &mut Graph<'_>, ids: &[usize]) -> Result<EncoderTrace> {
        self.check_len(ids.len())?;
        let h0 = encoder::embed(g, &self.embeddings, ids, self.config.encoder_dropout)?;
        encoder::encode(g, h0, &self.blocks, self.config.block_settings())
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.max_len {
            return Err(Error::Input(format!(
                "sentence of {len} tokens exceeds the maximum length {}",
                self.config.max_len
            )));
        }
        if len == 0 {
            return Err(Error::Input("empty sentence".into()));
        }
        Ok(())
    }

    /// Span representations per width `1..=min(K, T)`, before the head.
    pub fn span_reps(&self, g: &mut Graph<'_>, trace: &EncoderTrace) -> Result<Vec<Var>> {
        let top = trace.top();
        let t = g.shape(top)[0];
        let mut by_width = vec![top];
        if let Some(enc) = &self.span_encoder {
            let spans = enc.encode(g, trace, &self.blocks, self.config.block_settings())?;
            for &k in &spans.widths {
                by_width.push(spans.width_layer(g, k, spans.depth())?);
            }
        } else if let Some(agg) = &self.shallow {
            let widths: Vec<usize> = (2..=self.config.max_span.min(t)).collect();
            by_width.extend(span::aggregate_widths(g, agg, top, &widths)?);
        }
        heads::bilstm_refine(g, self.bilstm.as_ref(), &by_width)
    }

    /// Logits for every candidate span of the sentence.
    pub fn forward(&self, g: &mut Graph<'_>, ids: &[usize]) -> Result<ForwardOutput> {
        let trace = self.encode_tokens(g, ids)?;
        let spans = span::candidate_spans(ids.len(), self.config.max_span);
        let out: HeadOutput = if let Some(head) = &self.biaffine {
            heads::biaffine_spans(g, head, trace.top(), &spans)?
        } else {
            let head = self
                .classifier
                .as_ref()
                .ok_or_else(|| Error::Contract("model without a head".into()))?;
            let by_width = self.span_reps(g, &trace)?;
            let reps = g.concat_rows(&by_width)?;
            let widths: Vec<usize> = spans.iter().map(|(i, j)| j - i).collect();
            heads::classify(g, head, reps, &widths)?
        };
        Ok(ForwardOutput {
            spans,
            logits: out.logits,
            prelogits: out.prelogits,
        })
    }

    /// Evaluation-mode classification of every candidate span.
    pub fn score_spans(&self, ids: &[usize]) -> Result<Vec<SpanPrediction>> {
        if ids.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::with_params(&self.store);
        let out = self.forward(&mut g, ids)?;
        let probs = g.softmax(out.logits, 1)?;
        let probs = g.value(probs);
        let z = out.prelogits.map(|z| g.value(z));
        Ok(out
            .spans
            .iter()
            .enumerate()
            .map(|(r, &(start, end))| {
                let p = probs.row(r).to_vec();
                SpanPrediction {
                    start,
                    end,
                    type_index: argmax(&p),
                    probs: p,
                    prelogit: z.map(|z| z.row(r).to_vec()),
                }
            })
            .collect())
    }

    /// Candidates whose argmax is an entity type. Overlapping and nested
    /// predictions are all kept.
    pub fn predict_entities(&self, ids: &[usize]) -> Result<Vec<SpanPrediction>> {
        Ok(self
            .score_spans(ids)?
            .into_iter()
            .filter(SpanPrediction::is_entity)
            .collect())
    }
}
