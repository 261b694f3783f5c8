//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide error type. The CLI maps variants onto exit codes:
/// input/parse/invariant errors are user errors (1), training failures
/// are runtime errors (2), and IO/serialization failures are 3.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller-supplied data violated a precondition.
    #[error("input error: {0}")]
    Input(String),

    /// A text file could not be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// An internal invariant was violated (signals an upstream bug).
    #[error("invariant violation: {0}")]
    Invariant(String),

    /// Training failed (divergence, non-finite gradients).
    #[error("training error at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn invariant(msg: impl Into<String>) -> Self {
        Error::Invariant(msg.into())
    }
}
