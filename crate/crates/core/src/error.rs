use std::path::PathBuf;

use thiserror::Error;

use crate::hierarchy::NodeId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("unknown node {0}")]
    UnknownNode(NodeId),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Oracle(#[from] OracleError),
}

/// Failures raised while asking an oracle a question.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum OracleError {
    /// The answer could not be obtained (disconnect, timeout). The encounter
    /// must be retried later; nothing was mutated.
    #[error("oracle transport failure: {0}")]
    Transport(String),

    /// The oracle cannot answer because its own view of the hierarchy is
    /// inconsistent (for example a node without a ground-truth correspondent).
    #[error("oracle consistency failure: {0}")]
    Inconsistent(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
