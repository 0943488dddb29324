//! Error types shared across the engine.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("data error at byte offset {offset}: {msg}")]
    Data { offset: u64, msg: String },

    #[error("checkpoint does not match architecture: {msg}")]
    ArchitectureMismatch { msg: String },

    #[error("training diverged at iteration {iter}: {msg}")]
    Divergence { iter: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
