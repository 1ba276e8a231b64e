//! Deep span representations for span-based named entity recognition.
//!
//! A token Transformer encoder produces every layer `H⁰..H^L`; per-width
//! span Transformer blocks then refine span queries against the
//! layer-matched token slices of each span. Entity types are read off the
//! top span representations with a width-aware classification head.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod heads;
pub mod model;
pub mod params;
pub mod rng;
pub mod span;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Var};
pub use config::RunConfig;
pub use data::{Entity, Format, NestednessTag, Sentence, Vocab};
pub use error::{Error, Result};
pub use eval::{Prf, TypedSpan};
pub use model::{HeadKind, Model, ModelConfig, SpanPrediction};
pub use params::{ParamGroup, ParamId, ParamStore};
pub use rng::SplitMix64;
pub use span::{Aggregation, SpanEncoderConfig};
pub use tensor::Tensor;
pub use train::{Example, TrainConfig};
