//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DcfoError>;

#[derive(Debug, Error)]
pub enum DcfoError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("parse error at row {row}, column {column}: cannot read {value:?} as a number")]
    Parse {
        row: usize,
        column: usize,
        value: String,
    },

    #[error("ragged input: row {row} has {found} columns, expected {expected}")]
    Ragged {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("non-finite coordinate at point {row}, column {column}")]
    NonFinite { row: usize, column: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("k = {k} is too large for {n} points (need n >= k + 2)")]
    KTooLarge { k: usize, n: usize },

    #[error("point {index} has all {k} neighbours at distance 0 (duplicate policy is reject)")]
    DuplicateNeighborhood { index: usize, k: usize },

    #[error("index {index} out of range for {n} points")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("gradient undefined: query coincides with key point {index}")]
    GradientUndefined { index: usize },

    #[error("point {index} is not an outlier (LOF {score} <= threshold {threshold})")]
    NotAnOutlier {
        index: usize,
        score: f64,
        threshold: f64,
    },

    #[error("no inlier available at threshold {threshold}")]
    NoInlier { threshold: f64 },

    #[error("numerical failure in optimizer: {0}")]
    Numerical(String),

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl DcfoError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DcfoError::Io {
            path: path.into(),
            source,
        }
    }
}
