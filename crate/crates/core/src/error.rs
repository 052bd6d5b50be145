use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("layer {layer} not available: {detail}")]
    MissingLayer { layer: usize, detail: String },
    #[error("fingerprint mismatch: {0}")]
    Fingerprint(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("degenerate solution: {0}")]
    Degenerate(String),
    #[error("rejection budget exhausted: {0}")]
    Rejection(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Short machine-readable tag used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Invalid(_) => "invalid_argument",
            Error::Shape(_) => "shape_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::MissingLayer { .. } => "missing_layer",
            Error::Fingerprint(_) => "fingerprint_mismatch",
            Error::Diverged(_) => "diverged",
            Error::Degenerate(_) => "degenerate",
            Error::Rejection(_) => "rejection_budget",
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Config(_) => "config",
            Error::Json(_) => "json",
        }
    }
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Invalid(msg.into()))
}
