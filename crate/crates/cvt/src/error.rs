//! Error type shared by every module in the crate.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum CvtError {
    /// Incompatible operand shapes, with both shapes reported.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A convolution (or embedding) produced a non-positive output extent.
    #[error("geometry error on {axis}: {detail}")]
    Geometry { axis: &'static str, detail: String },

    /// An operation was called outside its contract (non-scalar backward,
    /// token count not matching the grid, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid model or run configuration; names the offending field.
    #[error("config error: {0}")]
    Config(String),

    /// Index (e.g. a class label) out of range.
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    /// A forward op produced NaN or Inf from finite inputs.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// Training aborted because the loss became non-finite.
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("checkpoint: bad magic bytes (not a checkpoint file)")]
    CheckpointMagic,

    #[error("checkpoint: unsupported format version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint: checksum mismatch (file corrupted)")]
    CheckpointChecksum,

    #[error("checkpoint: truncated file while reading {reading}")]
    CheckpointTruncated { reading: &'static str },

    /// Checkpoint contents do not match the expected model configuration.
    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, CvtError>;
