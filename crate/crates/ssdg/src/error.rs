use std::path::PathBuf;

use thiserror::Error;

/// Errors produced across the crate.
#[derive(Error, Debug)]
pub enum Error {
    /// A configuration value is out of its admissible range.
    #[error("invalid config: {field}: {message}")]
    Config { field: &'static str, message: String },

    /// Tensor or image shapes are incompatible with the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Dataset-level problems: missing files, inconsistent class sets, bad layouts.
    #[error("data error: {0}")]
    Data(String),

    /// A file could not be decoded as an image.
    #[error("cannot decode image {path}: {message}")]
    ImageDecode { path: PathBuf, message: String },

    /// Non-finite values encountered during training.
    #[error("numerical abort: {0}")]
    Numerical(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: &'static str, message: impl Into<String>) -> Self {
        Error::Config { field, message: message.into() }
    }

    /// Process exit code for the CLI contract: 2 for data/validation, 3 for numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
