//! Crate-wide error type.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum ScplError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("l2_normalize: row {row} has zero norm")]
    ZeroNormRow { row: usize },

    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("no positive pairs in batch")]
    NoPositivePairs,

    #[error("temperature must be > 0, got {tau}")]
    InvalidTemperature { tau: f64 },

    #[error("missing gradient for parameter {name}")]
    MissingGradient { name: String },

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("pipeline worker for component {component} failed: {detail}")]
    WorkerFailure { component: usize, detail: String },

    #[error("idx file {path}: bad magic (expected {expected:#010x}, found {found:#010x})")]
    IdxBadMagic {
        path: String,
        expected: u32,
        found: u32,
    },

    #[error("idx file {path}: truncated payload (expected {expected} bytes, found {found})")]
    IdxTruncated {
        path: String,
        expected: usize,
        found: usize,
    },

    #[error("idx files: image count {images} does not match label count {labels}")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("csv: unknown label column {name:?}")]
    UnknownLabelColumn { name: String },

    #[error("csv parse error: {0}")]
    Csv(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ScplError>;
