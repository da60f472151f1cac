use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("dimension {requested} exceeds the configured maximum {max}")]
    DimensionOverflow { requested: usize, max: usize },

    #[error("operator is not Hermitian (max |A - A^dagger| = {deviation:.3e})")]
    NotHermitian { deviation: f64 },

    #[error("invalid factor selection: {0}")]
    InvalidFactors(String),

    #[error("truncation deficit {deficit:.3e} exceeds tolerance {tolerance:.3e}")]
    Truncation { deficit: f64, tolerance: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("state is not normalized (norm^2 = {norm_sq:.12})")]
    NotNormalized { norm_sq: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("no convergence up to cutoff {max_cutoff} (last relative change {last_change:.3e})")]
    NotConverged { max_cutoff: usize, last_change: f64 },

    #[error("quantum Fisher information vanishes; no unbiased local estimator exists")]
    ZeroInformation,

    #[error("unresolved statistics: {0}")]
    Unresolved(String),

    #[error("i/o or format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Format(e.to_string())
    }
}
