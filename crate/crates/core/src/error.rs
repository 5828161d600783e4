use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    /// A data row failed validation. `row` is the 1-based data row (header excluded).
    #[error("row {row}: {message}")]
    Load { row: usize, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("no uncensored events in {0}")]
    NoEvents(String),

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("model file is malformed: {0}")]
    ModelFormat(String),

    #[error("unsupported model format version {found} (this build reads version {expected})")]
    ModelVersion { found: u64, expected: u64 },

    #[error("feature mismatch: model expects {expected:?}, data provides {found:?}")]
    FeatureMismatch {
        expected: Vec<String>,
        found: Vec<String>,
    },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("censoring calibration did not converge: {0}")]
    Calibration(String),

    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
