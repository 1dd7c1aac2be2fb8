use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("zero-norm {side} row {row}: cosine is undefined for a degenerate embedding")]
    ZeroNorm { side: &'static str, row: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("empty input to {0}")]
    Empty(&'static str),

    #[error("invalid value for `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("row {row} has no positive class column, required by {loss}")]
    MissingPositive { row: usize, loss: &'static str },

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("unknown class id {0}")]
    UnknownClass(usize),

    #[error("weight dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("remote error: {0}")]
    Remote(String),

    #[error("degenerate training state: {0}")]
    Degenerate(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by user-supplied configuration rather than runtime failures.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}
