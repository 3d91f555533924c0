use std::path::PathBuf;

use thiserror::Error;

use crate::losses::LossBreakdown;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor backend: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("invalid depth {value} at pixel (x={x}, y={y})")]
    InvalidDepth { x: usize, y: usize, value: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("value outside domain: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("io failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing intrinsics file {0}")]
    MissingIntrinsics(PathBuf),

    #[error("malformed intrinsics file {path}: {reason}")]
    BadIntrinsics { path: PathBuf, reason: String },

    #[error("image {path} is {found_w}x{found_h}, expected {expected_w}x{expected_h}")]
    SizeMismatch {
        path: PathBuf,
        expected_w: usize,
        expected_h: usize,
        found_w: usize,
        found_h: usize,
    },

    #[error("frame indices not contiguous: expected {expected}, found {found}")]
    NonContiguousFrames { expected: usize, found: usize },

    #[error("cannot decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("cannot encode {path}: {reason}")]
    Encode { path: PathBuf, reason: String },

    #[error("non-finite loss at step {step}: {breakdown}")]
    NonFiniteLoss { step: usize, breakdown: LossBreakdown },

    #[error("model state is not initialized")]
    Uninitialized,

    #[error("trajectory index mismatch: {0}")]
    IndexMismatch(String),

    #[error("evaluation mask selects no pixels")]
    EmptyMask,

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    /// Short, stable identifier for the error class; used on the CLI error stream.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::InvalidDepth { .. } => "invalid_depth",
            Error::Shape(_) => "shape",
            Error::Domain(_) => "domain",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::MissingIntrinsics(_) => "missing_intrinsics",
            Error::BadIntrinsics { .. } => "bad_intrinsics",
            Error::SizeMismatch { .. } => "size_mismatch",
            Error::NonContiguousFrames { .. } => "non_contiguous_frames",
            Error::Decode { .. } => "decode",
            Error::Encode { .. } => "encode",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Uninitialized => "uninitialized",
            Error::IndexMismatch(_) => "index_mismatch",
            Error::EmptyMask => "empty_mask",
            Error::Checkpoint(_) => "checkpoint",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
