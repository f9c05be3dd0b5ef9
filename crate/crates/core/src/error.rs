use thiserror::Error;

/// Result alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by tensor math, model construction, data loading, and
/// verification. The variants map onto the CLI's exit-code contract:
/// configuration problems, data problems, and verification failures are
/// distinguished so callers can report them differently.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible with the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A configuration value violates an operation's preconditions.
    #[error("config error: {0}")]
    Config(String),

    /// An input file does not match its documented binary format.
    #[error("data format error: {0}")]
    Format(String),

    /// An input file ended before its declared payload was complete.
    #[error("truncated data: {0}")]
    Truncated(String),

    /// Two files that must describe the same records disagree.
    #[error("pairing error: {0}")]
    Pairing(String),

    /// A numeric verification check did not hold.
    #[error("verification failure: {0}")]
    Verification(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors caused by bad input data (as opposed to bad config).
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Format(_) | Error::Truncated(_) | Error::Pairing(_) | Error::Io(_)
        )
    }
}
