//! Crate-wide error type.

/// Errors produced by grid operations, model I/O, rendering and the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("channel mismatch: expected {expected}, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("unknown network configuration `{0}`")]
    UnknownConfig(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("scene geometry out of bounds: {0}")]
    OutOfBounds(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
