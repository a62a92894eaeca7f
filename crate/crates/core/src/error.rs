use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate image id `{0}`")]
    DuplicateImage(String),

    #[error("image reference `{image_id}` cannot be resolved: {reason}")]
    MissingImage { image_id: String, reason: String },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate clustering: {0}")]
    Degenerate(String),

    #[error(transparent)]
    Provider(#[from] ProviderError),

    #[error("tree build aborted at level {level} after {completed_nodes} summary nodes: {source}")]
    BuildAborted {
        level: usize,
        completed_nodes: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("index error: {0}")]
    Index(String),

    #[error("index format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

/// Failures surfaced by a capability provider.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    /// Timeouts, refused connections and non-200 replies. Safe to retry.
    #[error("transport error (retriable): {0}")]
    Transport(String),

    /// The provider replied, but the reply breaks the wire contract.
    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("precondition failed: {0}")]
    Precondition(String),
}

impl ProviderError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, ProviderError::Transport(_))
    }
}
