use thiserror::Error;

/// Errors produced anywhere in the forecasting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor or array axis had the wrong extent.
    #[error("dimension error on axis {axis}: {detail}")]
    Dimension { axis: String, detail: String },

    /// An argument was outside its valid range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A caller broke an API contract (non-scalar loss, missing probabilities, ...).
    #[error("contract error: {0}")]
    Contract(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Input data was inconsistent (missing prediction, empty split, ...).
    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(axis: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Dimension {
            axis: axis.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
