use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Unified error type for loading, training, and budget planning.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    /// Malformed or inconsistent data: bad labels, ragged rows, non-finite
    /// values, dimension mismatches between model and input.
    #[error("data: {0}")]
    Data(String),

    /// Invalid hyperparameter or option combination.
    #[error("config: {0}")]
    Config(String),

    /// A bit/op budget that no admissible architecture satisfies.
    #[error("budget: {0}")]
    Budget(String),
}

impl Error {
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn budget(msg: impl Into<String>) -> Self {
        Error::Budget(msg.into())
    }
}
