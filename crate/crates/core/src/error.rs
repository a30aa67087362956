use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("incomplete tape: {0}")]
    State(String),

    #[error("malformed data file: {0}")]
    Format(String),

    #[error("inconsistent dataset: {0}")]
    Consistency(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint version mismatch: file has {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}
