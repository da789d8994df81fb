use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable class name used in machine-readable error lines.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Shape(_) => "ShapeError",
            Error::Config(_) => "ConfigError",
            Error::NonFiniteGradient(_) => "NonFiniteGradientError",
            Error::Checkpoint(_) => "CheckpointError",
            Error::Io(_) => "IoError",
            Error::Json(_) => "JsonError",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
