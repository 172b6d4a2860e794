use thiserror::Error;

/// Errors shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor or layer shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An argument violated a precondition (duplicate modes, bad ranges, ...).
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A file did not match its expected on-disk format.
    #[error("format error in {file}: {reason}")]
    Format { file: String, reason: String },

    /// Configuration text failed to parse or validate.
    #[error("config error: {0}")]
    Config(String),

    /// The optimizer produced a non-finite value.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// An internal consistency check failed; indicates a bug.
    #[error("internal error: {0}")]
    Internal(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
