use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{path}: bad magic, expected {expected:?}")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("{path}: unsupported format version {found}")]
    BadVersion { path: PathBuf, found: u32 },

    #[error("{path}: {reason}")]
    MalformedFile { path: PathBuf, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::MalformedFile { path: path.into(), reason: reason.into() }
    }

    /// True for errors caused by files and the filesystem rather than by
    /// invalid parameters. The CLI maps these to a distinct exit code.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io(_) | Error::BadMagic { .. } | Error::BadVersion { .. } | Error::MalformedFile { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
