use std::path::Path;

use thiserror::Error;

/// Command failure, split by the exit code it maps to.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config values or a checkpoint that does not match the config.
    #[error("{0}")]
    Usage(String),
    /// Failure while running: I/O, divergence, corrupt data.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        CliError::Runtime(format!("{}: {err}", path.display()))
    }
}

impl From<membart_core::Error> for CliError {
    fn from(e: membart_core::Error) -> Self {
        match e {
            membart_core::Error::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
