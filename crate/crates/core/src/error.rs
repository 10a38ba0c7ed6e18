//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration: bad hyperparameters, missing placeholders,
    /// missing credentials. Maps to exit code 2.
    #[error("configuration error: {0}")]
    Config(String),

    /// A tree cannot be rendered or violates a structural invariant.
    #[error("structural error at node {node}: {reason}")]
    Structure { node: String, reason: String },

    /// An operation was applied to a node of the wrong kind.
    #[error("domain error: {0}")]
    Domain(String),

    /// Two inputs that must be aligned are not.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("evaluation failed at position {position}: {source}")]
    Evaluation {
        position: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("gateway error after {attempts} attempt(s) (last status {status:?}): {message}")]
    Gateway {
        attempts: u32,
        status: Option<u16>,
        message: String,
    },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("gradient rejected: {0}")]
    Gradient(String),

    #[error("candidate rejected: {0}")]
    Candidate(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 1,
        }
    }

    /// Errors that only invalidate one generation slot rather than the whole step.
    pub fn is_slot_local(&self) -> bool {
        matches!(self, Error::Gradient(_) | Error::Candidate(_))
    }
}
