use std::path::PathBuf;

use diffcomp::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing prerequisite: {0}")]
    Missing(String),
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("{0}")]
    Invalid(String),
    #[error("non-finite {what} at step {step}")]
    NonFinite { step: u64, what: String },
    #[error("output directory {0} is locked by another run")]
    Locked(PathBuf),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Stable machine-readable category, used by the CLI.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Format { .. } | Error::Json(_) => "format",
            Error::Config(_) => "config",
            Error::Missing(_) => "missing_prerequisite",
            Error::Vocab(_) => "vocabulary",
            Error::Invalid(_) | Error::Tensor(TensorError::ShapeMismatch { .. }) => "invalid_input",
            Error::NonFinite { .. } | Error::Tensor(TensorError::NonFinite { .. }) => "non_finite",
            Error::Locked(_) => "locked",
            Error::Tensor(_) => "tensor",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
