use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("failed to load {}: {reason}", file.display())]
    Load { file: PathBuf, reason: String },

    #[error("incompatible checkpoint: parameter `{param}`: {reason}")]
    IncompatibleCheckpoint { param: String, reason: String },

    #[error("checkpoint checksum failure: {0}")]
    Checksum(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("degenerate evaluation: metric undefined on {skipped} of {total} resamples")]
    DegenerateEvaluation { skipped: usize, total: usize },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn load(file: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Load {
            file: file.into(),
            reason: reason.into(),
        }
    }
}
