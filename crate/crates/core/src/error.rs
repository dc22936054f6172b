use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("orthogonal factorization failed after {attempts} attempts")]
    DegenerateFactorization { attempts: usize },

    #[error("sequence too short: need at least {needed} labels, got {got}")]
    SequenceTooShort { needed: usize, got: usize },

    #[error("class {class} has no training samples")]
    MissingClass { class: usize },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("unknown {what}: `{value}`")]
    UnknownName { what: &'static str, value: String },

    #[error("{path}: row {row}: {message}")]
    Malformed {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the filesystem rather than by input values.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
