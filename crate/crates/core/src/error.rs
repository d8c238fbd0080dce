//! Error type shared across the toolkit.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Caller handed us something that violates a precondition (bad shape,
    /// out-of-range index, empty input).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Filesystem failure, annotated with the path involved.
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but its contents do not parse (bad magic, truncation,
    /// malformed record).
    #[error("format error: {0}")]
    Format(String),

    /// A checkpoint or config was loaded against an incompatible counterpart.
    #[error("incompatible: {0}")]
    Incompatible(String),

    /// A computation produced non-finite values and was aborted.
    #[error("numerical abort: {0}")]
    Numerical(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
