use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A state, action, activation or loss became NaN or infinite.
    #[error("numeric fault: {0}")]
    Numeric(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Genotype too large for a dense covariance matrix.
    #[error("dimension {dim} exceeds the covariance capacity cap of {cap}")]
    Capacity { dim: usize, cap: usize },

    #[error("replay buffer holds {size} transitions, {needed} required")]
    InsufficientData { size: usize, needed: usize },

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    /// Checkpoint magic, version or workflow id did not match, or the file is damaged.
    #[error("incompatible checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
