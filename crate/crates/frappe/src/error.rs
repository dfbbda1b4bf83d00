//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by codec, trainer, and toolkit operations.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or grid extents do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid codec configuration or parameter value.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Malformed or corrupt serialized data.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    /// Entropy payload failed to decode.
    #[error("entropy decode error at byte {offset}: {message}")]
    Entropy { offset: usize, message: String },

    /// Stored checksum does not match file contents.
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    /// No decoder snapshot for the requested channel count.
    #[error("no decoder snapshot for n={requested}; available: {available:?}")]
    SnapshotMissing {
        requested: usize,
        available: Vec<usize>,
    },

    /// Training loss became non-finite.
    #[error("training diverged (non-finite loss) at step {step}")]
    Divergence { step: usize },

    /// Requested channel count outside the valid range.
    #[error("channel count {requested} out of range 1..={max}")]
    ChannelRange { requested: usize, max: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn parameter(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }
}
