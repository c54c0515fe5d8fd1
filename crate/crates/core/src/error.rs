use thiserror::Error;

/// Error type shared across the whole crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape in {op}: {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("softmax row {row}: every key is masked")]
    DegenerateMask { row: usize },

    #[error("dropout rate {rate} outside [0, 1)")]
    InvalidRate { rate: f64 },

    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error("token id {id} outside vocabulary of size {vocab}")]
    UnknownToken { id: usize, vocab: usize },

    #[error("classification target {value} outside [0, 1]")]
    InvalidTarget { value: f64 },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("sample index {index} out of range (dataset has {len} samples)")]
    SampleOutOfRange { index: usize, len: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: bad magic, not a {expected} file")]
    BadMagic { path: String, expected: &'static str },

    #[error("{path}: unsupported version {found} (expected {expected})")]
    BadVersion {
        path: String,
        found: u32,
        expected: u32,
    },

    #[error("{path}: truncated file")]
    Truncated { path: String },

    #[error("{path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
