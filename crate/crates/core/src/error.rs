use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("support size mismatch: {left} vs {right} points")]
    SizeMismatch { left: usize, right: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    /// The pre-normalization vector of an amortized model vanished.
    #[error("degenerate direction: pre-normalization norm {norm:e}")]
    DegenerateDirection { norm: f64 },

    /// A column of a frame became linearly dependent on the previous ones.
    #[error("degenerate frame: column {column} residual norm {norm:e}")]
    DegenerateFrame { column: usize, norm: f64 },

    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: u64, msg: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
