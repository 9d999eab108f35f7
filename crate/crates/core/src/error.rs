use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, RomError>;

#[derive(Debug, Error)]
pub enum RomError {
    /// A file does not follow its declared layout.
    #[error("format error: {0}")]
    Format(String),
    /// Data violates an invariant of the type it is loaded into.
    #[error("validation error: {0}")]
    Validation(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("fit error: {0}")]
    Fit(String),
    #[error("solver error: {0}")]
    Solver(String),
    #[error("training error at epoch {epoch}: {message}")]
    Training { epoch: u64, message: String },
    #[error("scaling error: {0}")]
    Scaling(String),
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

impl RomError {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        RomError::Argument(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        RomError::Numerical(msg.into())
    }
}
