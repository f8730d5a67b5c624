use std::path::Path;

use cardioreg_core::CoreError;
use thiserror::Error;

pub type CliResult<T> = Result<T, CliError>;

/// Failure classes, each with its own process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),

    #[error("{0}")]
    MissingArtifact(String),

    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::MissingArtifact(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        CliError::Input(format!("{}: {err}", path.display()))
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::NonFiniteLoss { .. } | CoreError::Singular => CliError::Numerical(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}
