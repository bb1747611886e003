//! Sentence-level adaptive preference optimization on a toy conditional
//! language model.
//!
//! The crate covers the whole loop: sentence segmentation
//! ([`segmentation`]), per-sentence similarity and perplexity weights
//! ([`scoring`]), the reweighted implicit-reward margin and its loss
//! ([`margin`]), a small trainable language model with exact gradients
//! ([`model`]), synthetic preference data ([`pipeline`], [`corpus`],
//! [`decode`]) and the training loop ([`trainer`]).

pub mod corpus;
pub mod decode;
pub mod error;
pub mod exec;
pub mod margin;
pub mod model;
pub mod pipeline;
pub mod scoring;
pub mod segmentation;
pub mod trainer;
pub mod vocab;

pub use error::{AspoError, Result};
pub use exec::Execution;
pub use margin::{MarginBreakdown, RewardLevel};
pub use model::{ModelDims, ReferenceModel, ToyLmParams};
pub use pipeline::{PreferencePair, Prompt};
pub use scoring::{FeatureVector, HashedBagEmbedder, Scorer, SentenceWeights};
pub use trainer::{LossMode, MetricsRecord, PplSource, TrainingConfig};
