use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the crate. The variants double as the error
/// categories surfaced by the command-line front end.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("corrupt data in {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("missing dependency: {0}")]
    Dependency(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Corrupt {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for this category. 1 and 2 are left to the
    /// runtime and to argument parsing.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) => 3,
            Error::InvalidInput(_) => 4,
            Error::Dependency(_) => 5,
            Error::Corrupt { .. } => 6,
            Error::Contract(_) => 7,
            Error::Io { .. } => 8,
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !($cond) {
            return Err($crate::error::Error::InvalidInput(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
