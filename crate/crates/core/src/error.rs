use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, ClweError>;

#[derive(Debug, Error)]
pub enum ClweError {
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("embedding space contains no usable rows")]
    EmptySpace,

    #[error("zero vector encountered for token {token:?}")]
    DegenerateVector { token: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty seed dictionary: {0}")]
    EmptyDictionary(String),

    #[error("all {restarts} training restarts failed")]
    TrainingFailed { restarts: usize },

    #[error("target subspaces without members: {0:?}")]
    EmptyTargetSubspace(Vec<usize>),

    #[error("no evaluable words in the gold dictionary")]
    EmptyEvaluation,

    #[error("cannot serialize token {0:?}: tokens may not contain whitespace")]
    Unrepresentable(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl ClweError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        ClweError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        ClweError::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    /// Whether the error reports a configuration problem rather than a
    /// failure of the computation itself.
    pub fn is_config(&self) -> bool {
        matches!(self, ClweError::Config(_))
    }
}
