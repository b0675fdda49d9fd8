use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the GAP pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("target {target} out of vocabulary range 0..{vocab}")]
    TargetOutOfRange { target: usize, vocab: usize },
    #[error("token id {token} out of vocabulary range 0..{vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("sequence of length {len} exceeds the context window of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("sequence of length {len} is too short (need at least {min})")]
    SequenceTooShort { len: usize, min: usize },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("graph invariant violated: {0}")]
    Graph(String),
    #[error("invalid model config: {0}")]
    ModelConfig(String),
    #[error("missing parameter tensor {0}")]
    MissingParam(String),
    #[error("non-finite gradient in tensor {tensor} at step {step}")]
    NonFiniteGradient { tensor: String, step: u64 },
    #[error("invalid GAP config: {0}")]
    GapConfig(String),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("corpus {corpus} has {have} tokens, need at least {need}")]
    InsufficientText {
        corpus: String,
        have: usize,
        need: usize,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("dataset {path}: {msg}")]
    Dataset { path: PathBuf, msg: String },
    #[error("corpus validity gate failed: {0}")]
    ValidityGate(String),
    #[error("pretraining diverged at step {step}; last good checkpoint written to {path}")]
    Diverged { step: usize, path: PathBuf },
    #[error("{degraded} of {scheduled} runs degraded")]
    MajorityDegraded { degraded: usize, scheduled: usize },
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
