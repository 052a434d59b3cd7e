use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("unknown prompt {prompt:?}; nearest keys: {nearest:?}")]
    Resolution { prompt: String, nearest: Vec<String> },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }
}
