use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DrfError>;

#[derive(Debug, Error)]
pub enum DrfError {
    #[error("invalid target: {0}")]
    InvalidTarget(String),

    #[error("dimension mismatch: {what} expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid covariance: {0}")]
    Covariance(String),

    #[error("insufficient samples for initialization: need at least {needed}, got {available}")]
    InsufficientSamples { needed: usize, available: usize },

    #[error("stale forward cache: computed at parameter generation {cached}, backbone is at {current}")]
    StaleCache { cached: u64, current: u64 },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("missing column \"{0}\"")]
    MissingColumn(String),

    #[error("parse error at row {row}, column \"{column}\": cannot parse {value:?} as a number")]
    Parse { row: usize, column: String, value: String },

    #[error("non-finite value at row {row}, column \"{column}\"")]
    NonFinite { row: usize, column: String },

    #[error("empty file: {0}")]
    EmptyFile(PathBuf),

    #[error("unknown synthetic task {name:?}; valid tasks: {valid}")]
    UnknownTask { name: String, valid: String },

    #[error("unsupported model file version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("malformed model file: {0}")]
    ModelFormat(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
