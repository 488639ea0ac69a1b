use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("synthetic scene generation failed: {0}")]
    Generation(String),

    #[error("frame `{frame}`: {reason}")]
    Frame { frame: String, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub(crate) fn frame(frame: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Frame { frame: frame.into(), reason: reason.into() }
    }

    /// True for errors caused by bad input data rather than bad configuration.
    pub fn is_data_error(&self) -> bool {
        matches!(self, Self::Frame { .. } | Self::Io { .. } | Self::Checkpoint(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
