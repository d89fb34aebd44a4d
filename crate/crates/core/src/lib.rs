//! Nested named-entity recognition by joint mention tagging and typing.
//!
//! A sentence is encoded once, a mention tagger scores every span from
//! boundary, entity-token and region evidence, and a type classifier labels
//! only the spans that survive the tagger's threshold.

pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod mask;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tagger;
pub mod tape;
pub mod tensor;
pub mod train;

pub use config::{Ablation, CandidateSource, ModelConfig};
pub use error::{Error, Result};
pub use mask::{MaskKind, MaskMatrix};
pub use model::Model;
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
pub use train::{TrainConfig, Trainer};
