use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },

    #[error("shape {shape:?} holds {expected} values but buffer has {len}")]
    BufferLength {
        shape: Vec<usize>,
        expected: usize,
        len: usize,
    },

    #[error("degenerate weight: row {row} has zero norm")]
    DegenerateWeight { row: usize },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("backward called on a tensor that does not depend on any trainable leaf")]
    DetachedLoss,

    #[error("backward already ran on this tape; reset gradients first")]
    BackwardTwice,

    #[error("unknown tensor handle {0} for this tape")]
    UnknownVar(usize),

    #[error("probability row does not sum to 1 (sum = {sum})")]
    NotNormalized { sum: f64 },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("batch of {n} samples is too small to split")]
    BatchTooSmall { n: usize },

    #[error("percentile {0} must lie strictly between 0 and 1")]
    Percentile(f64),

    #[error("invalid split: {0}")]
    Split(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("config: {0}")]
    Config(String),

    #[error("{phase} diverged at epoch {epoch}, step {step}: {loss} = {value}")]
    Divergence {
        phase: &'static str,
        epoch: usize,
        step: usize,
        loss: &'static str,
        value: f64,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
