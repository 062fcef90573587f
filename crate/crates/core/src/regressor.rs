use ndarray::{Array2, ArrayView2};

use crate::data::Standardizer;
use crate::error::{DrfError, Result};
use crate::forest::ForestModel;

/// A forest together with the scalers that map raw features into its input
/// space and its standardized predictions back to target units.
#[derive(Debug, Clone, PartialEq)]
pub struct Regressor {
    forest: ForestModel,
    feature_scaler: Standardizer,
    target_scaler: Standardizer,
}

impl Regressor {
    pub fn new(forest: ForestModel, feature_scaler: Standardizer, target_scaler: Standardizer) -> Result<Self> {
        if feature_scaler.dim() != forest.input_dim() {
            return Err(DrfError::DimensionMismatch {
                what: "feature scaler width",
                expected: forest.input_dim(),
                actual: feature_scaler.dim(),
            });
        }
        if target_scaler.dim() != forest.target_dim() {
            return Err(DrfError::DimensionMismatch {
                what: "target scaler width",
                expected: forest.target_dim(),
                actual: target_scaler.dim(),
            });
        }
        Ok(Self {
            forest,
            feature_scaler,
            target_scaler,
        })
    }

    pub fn forest(&self) -> &ForestModel {
        &self.forest
    }

    pub fn feature_scaler(&self) -> &Standardizer {
        &self.feature_scaler
    }

    pub fn target_scaler(&self) -> &Standardizer {
        &self.target_scaler
    }

    pub fn input_dim(&self) -> usize {
        self.forest.input_dim()
    }

    pub fn target_dim(&self) -> usize {
        self.forest.target_dim()
    }

    pub fn predict_row(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(DrfError::DimensionMismatch {
                what: "input features",
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        let z = self.feature_scaler.transform_row(x);
        Ok(self.target_scaler.inverse_row(&self.forest.predict(&z)?))
    }

    /// Predictions in target units, one row per input row.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(DrfError::DimensionMismatch {
                what: "input features",
                expected: self.input_dim(),
                actual: x.ncols(),
            });
        }
        let z = self.feature_scaler.transform(x);
        let pred = self.forest.predict_batch(z.view())?;
        Ok(self.target_scaler.inverse_transform(pred.view()))
    }
}
