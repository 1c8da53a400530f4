use ctrlab_core::Error as CoreError;
use thiserror::Error;

/// A failed command, classified by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config keys or config invariants.
    #[error("{0}")]
    Usage(String),
    /// Missing, malformed or incompatible input files.
    #[error("{0}")]
    Data(String),
    /// Anything that fails while running a valid command on valid inputs.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    /// Wraps a core error raised while writing outputs.
    pub fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let msg = e.to_string();
        match e {
            CoreError::Config(_) => CliError::Usage(msg),
            CoreError::VocabMismatch(_)
            | CoreError::Data(_)
            | CoreError::Parse { .. }
            | CoreError::Schema { .. }
            | CoreError::Io { .. }
            | CoreError::Empty(_)
            | CoreError::Metric(_) => CliError::Data(msg),
            _ => CliError::Runtime(msg),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
