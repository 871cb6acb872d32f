use thiserror::Error;

/// Errors produced by this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad dimensions, missing sections, out-of-range values).
    #[error("config error: {0}")]
    Config(String),

    /// Shape or dimension mismatch between inputs.
    #[error("dimension mismatch: {0}")]
    Dim(String),

    /// Numerical-domain failure (non-PSD matrix, singular solve, condition blow-up).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A computation produced NaN or infinity.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Malformed or inconsistent data (file contents, row counts, parse failures).
    #[error("data error: {0}")]
    Data(String),

    /// CLI usage errors (unknown table id, empty input list, refusing to overwrite).
    #[error("usage error: {0}")]
    Usage(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml error: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
