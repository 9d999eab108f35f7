use nirom::RomError;
use thiserror::Error;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    /// Process exit status: 2 config, 3 numerical, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<RomError> for CliError {
    fn from(e: RomError) -> Self {
        let msg = e.to_string();
        match e {
            RomError::Argument(_) | RomError::Validation(_) => CliError::Config(msg),
            RomError::Numerical(_)
            | RomError::Fit(_)
            | RomError::Solver(_)
            | RomError::Training { .. }
            | RomError::Scaling(_) => CliError::Numerical(msg),
            RomError::Format(_) | RomError::Io(_) => CliError::Io(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
