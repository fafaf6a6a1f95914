//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A manifest line could not be parsed. Carries the 1-based line number.
    #[error("manifest line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Input data violates a documented invariant (bad bbox, empty mask row,
    /// unnormalized vector, positive/negative overlap, ...).
    #[error("validation: {0}")]
    Validation(String),

    /// Configuration is inconsistent or infeasible.
    #[error("config: {0}")]
    Config(String),

    /// A binary file has the wrong magic, version, or is truncated.
    #[error("format: {0}")]
    Format(String),

    /// A numeric failure at runtime (non-finite loss, zero-norm feature, ...).
    #[error("numeric: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Error::Validation(message.into())
    }

    pub fn config(message: impl Into<String>) -> Self {
        Error::Config(message.into())
    }

    pub fn format(message: impl Into<String>) -> Self {
        Error::Format(message.into())
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Error::Numeric(message.into())
    }
}
