use thiserror::Error;

/// Errors produced by the numeric core and the file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("empty calibration input")]
    EmptyCalibration,
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("matrix is numerically singular (condition estimate {0:.3e})")]
    Singular(f64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("internal error: {0}")]
    Internal(String),
    #[error(transparent)]
    Format(#[from] crate::io::qtns::QtnsError),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed json in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
