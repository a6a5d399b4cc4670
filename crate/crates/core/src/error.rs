use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the transfer pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0} is empty")]
    EmptyInput(String),

    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },

    #[error("invalid label at line {line}: {value}")]
    InvalidLabel { line: usize, value: String },

    #[error("duplicate id {id:?} at line {line}")]
    DuplicateId { line: usize, id: String },

    #[error("unknown domain {0:?}")]
    UnknownDomain(String),

    #[error("empty after tokenization: {0:?}")]
    EmptyAfterTokenization(String),

    #[error("domain {domain:?} has {available} items, needs at least {required}")]
    DomainTooSmall {
        domain: String,
        available: usize,
        required: usize,
    },

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("shape mismatch for {name}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("missing parameter {0:?}")]
    MissingParam(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0}")]
    InvalidInput(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("missing transferability weight for source item {0:?}")]
    MissingWeight(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
