//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument violates an operation's contract.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An operation was invoked on state it cannot work with
    /// (e.g. a decoder asked for hierarchy levels that were not retained).
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// A file could not be parsed. `line` is 1-based.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Training hit a numerical fault (NaN/Inf loss or gradient).
    #[error("training fault: {0}")]
    TrainingFault(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
