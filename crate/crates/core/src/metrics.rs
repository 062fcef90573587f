//! Mean absolute error and cumulative score.
//!
//! For multi-output targets a sample's absolute error is the mean of its
//! per-dimension absolute errors.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{DrfError, Result};

/// Default error level for the cumulative score.
pub const DEFAULT_CS_LEVEL: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub mae: f64,
    /// Percentage in `[0, 100]`.
    pub cs: f64,
    pub cs_level: f64,
    pub count: usize,
    pub within_count: usize,
}

/// Absolute error of every sample.
pub fn absolute_errors(predictions: ArrayView2<f64>, truths: ArrayView2<f64>) -> Result<Vec<f64>> {
    if predictions.dim() != truths.dim() {
        let (what, expected, actual) = if predictions.nrows() != truths.nrows() {
            ("prediction rows", truths.nrows(), predictions.nrows())
        } else {
            ("prediction columns", truths.ncols(), predictions.ncols())
        };
        return Err(DrfError::DimensionMismatch { what, expected, actual });
    }
    if predictions.nrows() == 0 || predictions.ncols() == 0 {
        return Err(DrfError::EmptyDataset);
    }
    let d = predictions.ncols() as f64;
    Ok(predictions
        .outer_iter()
        .zip(truths.outer_iter())
        .map(|(p, t)| p.iter().zip(t.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / d)
        .collect())
}

pub fn mae(predictions: ArrayView2<f64>, truths: ArrayView2<f64>) -> Result<f64> {
    let errors = absolute_errors(predictions, truths)?;
    Ok(errors.iter().sum::<f64>() / errors.len() as f64)
}

/// Percentage of samples whose absolute error is at most `level`.
pub fn cumulative_score(predictions: ArrayView2<f64>, truths: ArrayView2<f64>, level: f64) -> Result<f64> {
    evaluate(predictions, truths, level).map(|m| m.cs)
}

pub fn evaluate(predictions: ArrayView2<f64>, truths: ArrayView2<f64>, level: f64) -> Result<MetricsRecord> {
    if !(level >= 0.0) {
        return Err(DrfError::Config(format!(
            "error level must be non-negative, got {level}"
        )));
    }
    let errors = absolute_errors(predictions, truths)?;
    let count = errors.len();
    let within_count = errors.iter().filter(|&&e| e <= level).count();
    Ok(MetricsRecord {
        mae: errors.iter().sum::<f64>() / count as f64,
        cs: within_count as f64 / count as f64 * 100.0,
        cs_level: level,
        count,
        within_count,
    })
}
