use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("non-finite value in state update at token {token}")]
    NumericOverflow { token: usize },

    #[error("layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite gradient for `{0}`")]
    NonFiniteGradient(String),

    #[error("parameter sets differ: {0}")]
    ParamMismatch(String),

    #[error("training diverged at step {step} (last good step: {last_good:?})")]
    Diverged { step: usize, last_good: Option<usize> },

    #[error("bad checkpoint magic in {}", path.display())]
    BadMagic { path: PathBuf },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint truncated while reading {what}")]
    Truncated { what: String },

    #[error("checkpoint tensor `{name}` has shape {found:?}, config expects {expected:?}")]
    CheckpointShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint is malformed: {0}")]
    Malformed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
