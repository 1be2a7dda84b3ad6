//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape disagreement; names both offending shapes.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An API contract was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Operation issued in an invalid state (e.g. double backward).
    #[error("invalid state: {0}")]
    State(String),

    /// Index out of range (token ids, rows, tasks).
    #[error("index out of range: {0}")]
    Index(String),

    /// Config rejected; lists every violated constraint.
    #[error("invalid configuration: {}", .0.join("; "))]
    Validation(Vec<String>),

    /// Unknown task or prefix id looked up in a registry/bank.
    #[error("unknown task: {0}")]
    UnknownTask(String),

    /// Malformed input data (JSONL records, token streams).
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint container problems: corruption, version, hash mismatch.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training aborted on a non-finite loss; carries the diagnostic dump.
    #[error("non-finite loss at step {step} (task {task}, batch {batch_ids:?})")]
    NonFinite {
        step: u64,
        task: String,
        batch_ids: Vec<String>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
