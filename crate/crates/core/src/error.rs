use thiserror::Error;

use crate::expr::ParseError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error(transparent)]
    Parse(#[from] ParseError),

    #[error("task error: {0}")]
    Task(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numerical divergence: {0}")]
    Diverged(String),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
