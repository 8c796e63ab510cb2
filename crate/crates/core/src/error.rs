use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FrkError>;

/// Every failure the engine can report.
///
/// Variants fall into two families: input problems (bad files, schemas,
/// shapes, parameter values) and numeric problems (singular systems,
/// non-finite results, a non-monotone EM trace). [`FrkError::is_numeric`]
/// tells them apart.
#[derive(Debug, Error)]
pub enum FrkError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {path} at row {row}: {message}")]
    Csv {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("log-likelihood decreased at iteration {iteration}: {previous} -> {current}")]
    NonMonotone {
        iteration: usize,
        previous: f64,
        current: f64,
    },

    #[error("monte carlo failure: {0}")]
    MonteCarlo(String),
}

impl FrkError {
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            FrkError::Singular(_)
                | FrkError::Numeric(_)
                | FrkError::NonMonotone { .. }
                | FrkError::MonteCarlo(_)
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FrkError::Io {
            path: path.into(),
            source,
        }
    }
}
