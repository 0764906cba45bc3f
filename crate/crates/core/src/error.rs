use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at {layer}: expected {expected}, got {got}")]
    ShapeMismatch {
        layer: String,
        expected: String,
        got: String,
    },

    #[error("invalid layer {index} ({kind}): {reason}")]
    InvalidLayer {
        index: usize,
        kind: &'static str,
        reason: String,
    },

    #[error("parameter buffers are not congruent: {0}")]
    Incongruent(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{term} requested but teacher logits are missing")]
    MissingTeacher { term: &'static str },

    #[error("label row {row} is not one-hot")]
    NotOneHot { row: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("empty pool")]
    EmptyPool,

    #[error("pool exhausted for class {class}: needed {needed}, {available} available (short by {})", needed - available)]
    PoolExhausted {
        class: usize,
        needed: usize,
        available: usize,
    },

    #[error("{path}:{line}: {reason}")]
    Csv {
        path: PathBuf,
        line: u64,
        reason: String,
    },

    #[error("round {round} out of range 1..={total}")]
    RoundOutOfRange { round: usize, total: usize },

    #[error("metric unavailable: {0}")]
    Metric(String),

    #[error("config error at `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
