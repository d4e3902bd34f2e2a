use std::fmt;

use thiserror::Error;

/// A named tensor dimension, used to point at the offending axis in errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dim {
    Batch,
    Channel,
    InChannel,
    OutChannel,
    Spatial(usize),
}

impl fmt::Display for Dim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dim::Batch => write!(f, "batch"),
            Dim::Channel => write!(f, "channel"),
            Dim::InChannel => write!(f, "input channel"),
            Dim::OutChannel => write!(f, "output channel"),
            Dim::Spatial(d) => write!(f, "spatial dimension {d}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("coordinate {value} out of range for {dim} of size {size}")]
    IndexOutOfRange { dim: Dim, value: usize, size: usize },

    #[error("key {key} out of range for {total} elements")]
    KeyOutOfRange { key: u64, total: u64 },

    #[error("duplicate key {0}")]
    DuplicateKey(u64),

    #[error("keys not strictly increasing at position {0}")]
    UnsortedKeys(usize),

    #[error("stored value at position {0} is exactly zero")]
    StoredZero(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dense buffer holds {have} entries but {need} are required")]
    BufferTooSmall { have: usize, need: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{context}: {message} (byte offset {offset})")]
    Format {
        context: &'static str,
        offset: u64,
        message: String,
    },

    #[error("unsupported version {found} (expected {expected})")]
    Version { found: String, expected: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(context: &'static str, offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            context,
            offset,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
