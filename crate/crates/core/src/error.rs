use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input too short: {0}")]
    InputTooShort(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("patching error: {0}")]
    Patching(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numerical guard tripped: {0}")]
    NumericalGuard(String),

    #[error("divergence: {0}")]
    Divergence(String),

    #[error("fusion error: {0}")]
    Fusion(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
