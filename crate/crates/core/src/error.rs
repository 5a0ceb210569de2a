use std::path::PathBuf;

use thiserror::Error;

/// Errors shared across the pipeline stages.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed binary archive. `offset` is the byte position where
    /// decoding failed.
    #[error("format error in {path} at byte {offset}: {reason}")]
    Format {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    /// Inconsistent data across utterances (e.g. feature dimension drift).
    #[error("consistency error: {0}")]
    Consistency(String),

    /// Missing or contradictory metadata (speaker ids, alignment spans).
    #[error("metadata error: {0}")]
    Metadata(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("shape error: {0}")]
    Shape(String),

    /// Two inputs that must align frame-by-frame do not.
    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("bounds error: {0}")]
    Bounds(String),

    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            reason: reason.into(),
        }
    }
}
