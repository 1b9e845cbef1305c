use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the mining engine.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller passed arguments that violate an operation's contract.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A configuration is missing a required piece or holds an invalid value.
    #[error("configuration error: {0}")]
    Config(String),

    /// An API was driven in the wrong order (e.g. epochs going backwards).
    #[error("usage error: {0}")]
    Usage(String),

    /// Scene synthesis could not satisfy the requested layout.
    #[error("generation error: {0}")]
    Generation(String),

    /// An on-disk file is malformed.
    #[error("{}: {field}: {message}", path.display())]
    Data {
        path: PathBuf,
        field: String,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn data(path: impl Into<PathBuf>, field: impl Into<String>, message: impl ToString) -> Self {
        Error::Data {
            path: path.into(),
            field: field.into(),
            message: message.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input data rather than bad usage.
    pub fn is_data_error(&self) -> bool {
        matches!(self, Error::Data { .. } | Error::Io { .. } | Error::Generation(_))
    }
}
