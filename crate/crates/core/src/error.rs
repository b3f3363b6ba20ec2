use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Sampling rate cannot represent the 4th harmonic of the fastest stimulus.
    #[error("aliasing configuration: fs {fs_hz} Hz must be at least {required_hz} Hz")]
    Aliasing { fs_hz: f64, required_hz: f64 },

    #[error("filter design: {0}")]
    Design(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error(transparent)]
    Frame(#[from] crate::link::FrameError),

    #[error("io: {0}")]
    Io(#[from] io::Error),

    #[error("parse: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
