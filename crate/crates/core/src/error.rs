use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("reference error: {0}")]
    Reference(String),
    #[error("incomplete mortality table: {0}")]
    Completeness(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("sampler initialization failed: {0}")]
    Initialization(String),
    #[error("disconnected treatment network: {0}")]
    Disconnected(String),
    #[error("singular observation covariance in study {study}; set `jitter = true` to add 1e-8 to the diagonal")]
    SingularCovariance { study: String },
    #[error("missing external survival curves for: {0}")]
    MissingCurves(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Whether this error stems from bad user input (CLI exit code 2).
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Parse { .. }
            | Error::Validation(_)
            | Error::Reference(_)
            | Error::Completeness(_)
            | Error::Config(_)
            | Error::Disconnected(_)
            | Error::SingularCovariance { .. }
            | Error::MissingCurves(_)
            | Error::InvalidArgument(_) => true,
            Error::Stage { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
