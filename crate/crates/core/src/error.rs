use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed PLY data. `offset` is the byte offset into the file where
    /// the problem was detected.
    #[error("PLY parse error at byte {offset}: {message}")]
    Ply { offset: u64, message: String },

    /// Malformed line-oriented text input (labels, predictions, summaries).
    #[error("{path}:{line}: {message}")]
    Text {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn text(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Text {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
