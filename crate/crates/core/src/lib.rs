//! Gated relation network sequence tagger.
//!
//! Layers, training loop, evaluation and persistence for a CNN + pairwise
//! relation + CRF named entity tagger, on a small reverse-mode autodiff engine.

pub mod checkpoint;
pub mod context;
pub mod corpus;
pub mod crf;
pub mod embed;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod relation;
pub mod synthetic;
pub mod tagger;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use corpus::{Batch, Column, Scheme, Sentence, Vocab};
pub use error::{GrnError, Result};
pub use metrics::{LabeledSpan, Prf, SpanCounts};
pub use model::{ContextMode, ModelConfig, ModelParams};
pub use numcore::{Graph, NodeId, Real, SeqLayout, Tensor};
pub use relation::FusionKind;
pub use trainer::{Precision, TrainConfig};
