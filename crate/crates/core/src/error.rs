//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/matrix dimensions do not line up for an operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Non-finite values or other numerical failures.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Invalid configuration or flag combination.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or inconsistent corpus data.
    #[error("corpus error: {0}")]
    Corpus(String),

    /// Checkpoint serialization/deserialization failure.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn corpus(msg: impl Into<String>) -> Self {
        Error::Corpus(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
