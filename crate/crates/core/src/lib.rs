//! Unsupervised extractive summarization built on a hierarchical transformer.
//!
//! The pipeline pre-trains a token-level + sentence-level transformer encoder
//! on unlabeled documents with two objectives (masked sentence prediction and
//! sentence shuffling), then ranks sentences by combining masked-sentence
//! probabilities with importance propagated through the averaged sentence-level
//! self-attention matrix. Evaluation ships with ROUGE-1/2/L, LEAD-k and greedy
//! oracle baselines, and sentence-position analytics.

pub mod autodiff;
pub mod corpus;
pub mod eval;
pub mod model;
pub mod pretrain;
pub mod rank;

mod error;

pub use error::{Error, Result};

/// Default scalar type for the whole pipeline. Training, checkpoints and
/// gradient checks all run in 64-bit floats.
pub type Tensor = autodiff::Tensor<f64>;
pub type Graph = autodiff::Graph<f64>;
pub type Adam = autodiff::Adam<f64>;
