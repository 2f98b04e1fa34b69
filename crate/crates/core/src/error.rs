use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("malformed header: {0}")]
    BadHeader(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("{0} trailing bytes after declared payload")]
    TrailingBytes(usize),

    #[error("non-finite value at flat index {0}")]
    NonFiniteValue(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("group size {group_size} does not divide {columns} columns")]
    BadGroupSize { group_size: usize, columns: usize },

    #[error("calibration set is empty")]
    EmptyCalibration,

    #[error("no calibration tokens available for the bit-allocation search")]
    InsufficientCalibration,

    #[error("matrix is not positive definite (pivot {pivot} = {value})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("non-finite intermediate in {stage}")]
    NonFiniteIntermediate { stage: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("inconsistent plan: {0}")]
    InconsistentPlan(String),

    #[error("corrupt offset table: {0}")]
    CorruptOffsets(String),

    #[error("code out of range: {0}")]
    CodeOutOfRange(String),

    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),

    #[error("report serialization failed: {0}")]
    Json(#[from] serde_json::Error),
}
