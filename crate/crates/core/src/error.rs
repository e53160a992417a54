use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{0}: empty input")]
    Empty(&'static str),

    #[error("non-finite value at coordinate {coordinate}")]
    NonFinite { coordinate: usize },

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("field `{field}`: id {id} out of vocabulary (size {size})")]
    OutOfVocab { field: &'static str, id: String, size: usize },

    #[error("invalid parameter: {0}")]
    Invalid(String),

    #[error("user {user}: timestamp {got} precedes last ingested timestamp {last}")]
    TimestampRegression { user: String, last: i64, got: i64 },

    #[error("user {0} has no memory (cold start)")]
    ColdStart(String),

    #[error("store entry for user {user} is inconsistent: {msg}")]
    Corrupt { user: String, msg: String },

    #[error("model version mismatch: store has {store}, model is {model}")]
    VersionMismatch { store: String, model: String },

    #[error("non-finite loss in batch {batch}")]
    NonFiniteLoss { batch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
