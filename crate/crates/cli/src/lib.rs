//! Experiment runner behind the `losslearn` binary.

pub mod commands;
pub mod config;
pub mod output;
pub mod report;

pub use config::{Precision, RunConfig, TaskConfig};

/// Process exit codes.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const RUNTIME: i32 = 2;
    /// Completed, but some inputs were skipped.
    pub const WARNINGS: i32 = 3;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => exit::USAGE,
            CliError::Runtime(_) => exit::RUNTIME,
        }
    }
}

impl From<losslearn::Error> for CliError {
    fn from(e: losslearn::Error) -> Self {
        use losslearn::Error as E;
        match e {
            E::Config { .. } | E::Parse(_) | E::Task(_) => CliError::Config(e.to_string()),
            E::Contract(_) | E::Diverged(_) => CliError::Runtime(e.to_string()),
        }
    }
}

pub(crate) fn io_error(path: &std::path::Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}
