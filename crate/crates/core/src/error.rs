use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GrnError>;

#[derive(Debug, Error)]
pub enum GrnError {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },

    #[error("{op}: kernel width {kernel} exceeds padded length {padded}, output would be empty")]
    EmptyOutput {
        op: &'static str,
        kernel: usize,
        padded: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward: {0}")]
    Backward(String),

    #[error("id {id} out of range for a table with {rows} rows")]
    IdOutOfRange { id: usize, rows: usize },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid label `{0}`")]
    Label(String),

    #[error("unknown label `{0}` (not in the label vocabulary)")]
    UnknownLabel(String),

    #[error("{path}: line {line}: {message}")]
    EmbeddingFormat {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("instance too large for enumeration: {0}")]
    TooLarge(String),

    #[error("empty corpus: {0}")]
    EmptyCorpus(&'static str),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint payload is corrupt (checksum mismatch)")]
    Checksum,

    #[error("vocabulary hash mismatch: checkpoint was trained with {expected}, got {found}")]
    VocabMismatch { expected: String, found: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch}; parameter norms: {norms}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        norms: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
