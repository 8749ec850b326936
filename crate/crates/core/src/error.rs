use std::path::PathBuf;

use thiserror::Error;

/// Every fallible operation in the crate reports one of these.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("out of range: {0}")]
    OutOfRange(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("non-finite value produced by `{op}`")]
    NumericOverflow { op: &'static str },
    #[error("format error at byte offset {offset}: {msg}")]
    Format { offset: u64, msg: String },
    /// Training hit a non-finite loss or gradient and stopped.
    #[error("training diverged at step {step}{}", checkpoint.as_ref().map(|p| format!(" (diagnostic checkpoint {})", p.display())).unwrap_or_default())]
    Diverged {
        step: u64,
        checkpoint: Option<PathBuf>,
    },
    #[error("resource limit exceeded: {0}")]
    Resource(String),
    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
