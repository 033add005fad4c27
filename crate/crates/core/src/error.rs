//! Error type shared across the crate.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("data error: {path}: {source}")]
    DataIo {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("shape mismatch: {0}")]
    Shape(String),
}

impl Error {
    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::DataIo { .. } => 3,
            Error::Numeric(_) | Error::Shape(_) => 4,
            Error::Checkpoint(_) => 5,
        }
    }
}
