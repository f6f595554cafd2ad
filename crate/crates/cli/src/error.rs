use std::path::PathBuf;

use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config {path}: {reason}")]
    Config { path: PathBuf, reason: String },
    #[error(transparent)]
    Core(#[from] clseg_core::Error),
}

impl CliError {
    /// 1 for usage and configuration errors, 2 for bad data, 3 for numerical
    /// failure.
    pub fn exit_code(&self) -> i32 {
        use clseg_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::Config { .. } => 1,
            CliError::Core(E::Validation(_) | E::Contract(_)) => 1,
            CliError::Core(E::NonFinite(_)) => 3,
            CliError::Core(_) => 2,
        }
    }
}
