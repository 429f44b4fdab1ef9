use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument is outside its allowed range.
    #[error("invalid parameter: {0}")]
    Parameter(String),
    /// Input data violates a domain invariant (empty scene, non-finite values, ...).
    #[error("domain error: {0}")]
    Domain(String),
    /// A shape or internal consistency check failed.
    #[error("internal error: {0}")]
    Internal(String),
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("version mismatch in {what}: {detail}")]
    VersionMismatch { what: String, detail: String },
    #[error("config hash mismatch: checkpoint {found}, config {expected}")]
    ConfigHashMismatch { expected: String, found: String },
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("malformed data in {}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn internal(msg: impl Into<String>) -> Self {
        Error::Internal(msg.into())
    }
}
