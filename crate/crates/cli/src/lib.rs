//! The `cues` command-line tool and HTTP service.

pub mod commands;
pub mod options;
pub mod service;

use thiserror::Error;

/// Failure of a command, split by exit status.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or flag combinations; exit status 2.
    #[error("{0}")]
    Usage(String),
    /// Bad data, I/O or backend failure; exit status 1.
    #[error("{0}")]
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failure(_) => 1,
        }
    }
}

pub fn failure(e: impl std::fmt::Display) -> CliError {
    CliError::Failure(e.to_string())
}
