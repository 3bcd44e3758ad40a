//! Library backing the `gtal` experiment driver; the binary is a thin
//! argument-parsing wrapper so integration tests can drive every command
//! in-process.

pub mod commands;
pub mod config;
pub mod reports;

use thiserror::Error;

/// Command failures split by exit code: configuration/usage problems exit
/// with 2, runtime failures with 1.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
