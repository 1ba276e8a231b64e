//! Run configuration read from TOML.
//!
//! Key names follow the usual hyperparameter table vocabulary
//! (`maximum_span_size`, `boundary_smoothing_epsilon`, `lstm_hidden_size`,
//! ...). Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Format;
use crate::error::{Error, Result};
use crate::model::{HeadKind, ModelConfig};
use crate::span::Aggregation;
use crate::train::{Smoothing, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    /// Inner width of the Transformer feed-forward sublayer.
    pub transformer_ffn_size: usize,
    pub encoder_dropout: f64,
    pub max_len: usize,
    pub head: HeadKind,
    pub maximum_span_size: usize,
    /// Span Transformer depth; defaults to `num_layers` for the deep head
    /// and must stay unset (or 0) for the others.
    pub span_depth: Option<usize>,
    pub initial_aggregation: Aggregation,
    pub share_weights: bool,
    pub per_width_params: bool,
    /// Defaults to on for the span classifier heads and off for the
    /// biaffine ones.
    pub use_bilstm: Option<bool>,
    pub lstm_hidden_size: usize,
    pub lstm_layers: usize,
    pub lstm_dropout: f64,
    pub width_embedding_size: usize,
    pub ffn_hidden_size: usize,
    pub ffn_layers: usize,
    pub ffn_dropout: f64,
    pub biaffine_size: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let t = ModelConfig::toy(1, 1);
        Self {
            num_layers: t.layers,
            hidden_size: t.hidden,
            num_heads: t.heads,
            transformer_ffn_size: t.ffn_inner,
            encoder_dropout: t.encoder_dropout,
            max_len: t.max_len,
            head: t.head,
            maximum_span_size: t.max_span,
            span_depth: None,
            initial_aggregation: t.aggregation,
            share_weights: t.share_weights,
            per_width_params: t.per_width_params,
            use_bilstm: None,
            lstm_hidden_size: t.lstm_hidden,
            lstm_layers: 1,
            lstm_dropout: t.lstm_dropout,
            width_embedding_size: t.width_dim,
            ffn_hidden_size: t.ffn_hidden,
            ffn_layers: t.ffn_layers,
            ffn_dropout: t.ffn_dropout,
            biaffine_size: t.biaffine_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub number_of_epochs: usize,
    pub batch_size: usize,
    pub learning_rate_pretrained: f64,
    pub learning_rate_other: f64,
    pub warmup_fraction: f64,
    pub gradient_clip_norm: f64,
    pub boundary_smoothing_epsilon: f64,
    pub boundary_smoothing_distance: usize,
    pub weight_decay: f64,
    pub eval_train: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            number_of_epochs: 30,
            batch_size: 8,
            learning_rate_pretrained: 1e-3,
            learning_rate_other: 3e-3,
            warmup_fraction: 0.2,
            gradient_clip_norm: 5.0,
            boundary_smoothing_epsilon: 0.1,
            boundary_smoothing_distance: 1,
            weight_decay: 0.01,
            eval_train: false,
        }
    }
}

/// Generated corpus used when no data paths are given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub seed: u64,
    pub train_sentences: usize,
    pub dev_sentences: usize,
    pub test_sentences: usize,
    pub vocab_size: usize,
    pub nest_rate: f64,
    pub max_len: usize,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        Self {
            seed: 7,
            train_sentences: 50,
            dev_sentences: 20,
            test_sentences: 20,
            vocab_size: 20,
            nest_rate: 0.5,
            max_len: 16,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub format: Option<Format>,
    pub synthetic: Option<SyntheticSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Seeds for repeated runs (ablations).
    pub seeds: Vec<u64>,
    pub model: ModelSection,
    pub train: TrainSection,
    pub data: DataSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            seeds: vec![1, 2, 3, 4, 5],
            model: ModelSection::default(),
            train: TrainSection::default(),
            data: DataSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Consistency checks that do not need the data.
    pub fn check(&self) -> Result<()> {
        let m = &self.model;
        if m.lstm_layers != 1 {
            return Err(Error::Config(format!(
                "lstm_layers = {} unsupported; only a single BiLSTM layer is implemented",
                m.lstm_layers
            )));
        }
        if m.head != HeadKind::Dspert && m.span_depth.is_some_and(|d| d > 0) {
            return Err(Error::Config(format!(
                "span_depth is a span-encoder setting and does not apply to head `{}`",
                m.head
            )));
        }
        self.train_config().validate()?;
        self.model_config(2, 1).validate()
    }

    pub fn model_config(&self, vocab_size: usize, num_types: usize) -> ModelConfig {
        let m = &self.model;
        let span_depth = match m.head {
            HeadKind::Dspert => m.span_depth.unwrap_or(m.num_layers),
            _ => 0,
        };
        ModelConfig {
            vocab_size,
            max_len: m.max_len,
            num_types,
            layers: m.num_layers,
            hidden: m.hidden_size,
            heads: m.num_heads,
            ffn_inner: m.transformer_ffn_size,
            encoder_dropout: m.encoder_dropout,
            head: m.head,
            max_span: m.maximum_span_size,
            span_depth,
            aggregation: m.initial_aggregation,
            share_weights: m.share_weights,
            per_width_params: m.per_width_params,
            use_bilstm: m.use_bilstm.unwrap_or(!m.head.is_biaffine()),
            lstm_hidden: m.lstm_hidden_size,
            lstm_dropout: m.lstm_dropout,
            width_dim: m.width_embedding_size,
            ffn_hidden: m.ffn_hidden_size,
            ffn_layers: m.ffn_layers,
            ffn_dropout: m.ffn_dropout,
            biaffine_dim: m.biaffine_size,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.number_of_epochs,
            batch_size: t.batch_size,
            lr_pretrained: t.learning_rate_pretrained,
            lr_fresh: t.learning_rate_other,
            warmup_fraction: t.warmup_fraction,
            clip_norm: t.gradient_clip_norm,
            smoothing: Smoothing {
                epsilon: t.boundary_smoothing_epsilon,
                distance: t.boundary_smoothing_distance,
            },
            weight_decay: t.weight_decay,
            seed: self.seed ^ 0x7A11_5EED,
            eval_train: t.eval_train,
        }
    }
}
