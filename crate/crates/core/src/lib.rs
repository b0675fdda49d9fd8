//! Gradient ascent post-training (GAP) for small autoregressive language
//! models: autodiff, a decoder-only transformer, the ascent procedure,
//! familiarity-bucketed corpora, evaluation, and sweep orchestration.

pub mod ascent;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod model;
pub mod pipeline;
pub mod pretrain;
pub mod report;
pub mod stats;
pub mod sweep;
pub mod synth;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
pub use model::{ModelConfig, ModelParams};
pub use tensor::Tensor;
