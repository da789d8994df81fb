use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Schema(String),
    #[error("{0}")]
    EmptyStream(String),
    #[error("{0}")]
    Manifest(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    InsufficientData(String),
    #[error("{0}")]
    Shape(String),
    #[error("sample variance is zero")]
    ZeroVariance,
    #[error("{0}")]
    DegenerateData(String),
    #[error(transparent)]
    Nd(#[from] ndcore::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Error class name for machine-parsable diagnostics.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Schema(_) => "SchemaError",
            Error::EmptyStream(_) => "EmptyStreamError",
            Error::Manifest(_) => "ManifestError",
            Error::Config(_) => "ConfigError",
            Error::InsufficientData(_) => "InsufficientDataError",
            Error::Shape(_) => "ShapeError",
            Error::ZeroVariance => "ZeroVarianceError",
            Error::DegenerateData(_) => "DegenerateDataError",
            Error::Nd(e) => e.class(),
            Error::Io(_) => "IoError",
            Error::Csv(_) => "CsvError",
            Error::Json(_) => "JsonError",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
