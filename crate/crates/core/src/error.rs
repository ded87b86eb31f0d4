use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the encryption, protocol, training and analysis layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("unsupported matrix expansion algorithm `{0}`")]
    UnsupportedAlgorithm(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("level {level} at index {index} outside [-{bound}, {bound}]")]
    LevelOutOfRange {
        index: usize,
        level: i64,
        bound: i64,
    },

    #[error("residue {residue} at index {index} is not a multiple of the step {step}")]
    InexactDecryption {
        index: usize,
        residue: i64,
        step: u64,
    },

    #[error("non-finite value at index {0}")]
    NonFinite(usize),

    #[error("input not clipped: |{value}| > C = {clip} at index {index}")]
    NotClipped { index: usize, value: f64, clip: f64 },

    #[error("{what} must be at least {min}, got {actual}")]
    TooFew {
        what: &'static str,
        min: usize,
        actual: usize,
    },

    #[error("domain error in {function}: {detail}")]
    Domain {
        function: &'static str,
        detail: String,
    },

    #[error("malformed message: {0}")]
    Malformed(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
