//! Versioned JSON model files.
//!
//! Floats are written in the shortest decimal form that parses back to the
//! same `f64` (at most 17 significant digits), so a loaded model predicts
//! bit-for-bit like the one that was saved.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneSpec};
use crate::data::Standardizer;
use crate::error::{DrfError, Result};
use crate::forest::{ForestModel, IndexFunction, LeafGaussian, Tree, TreeTopology};
use crate::regressor::Regressor;

pub const FORMAT_NAME: &str = "drf-model";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    /// `out × in`, row-major.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneRecord {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub layers: Vec<LayerParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafRecord {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeRecord {
    pub unit_of_node: Vec<usize>,
    pub leaves: Vec<LeafRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub d_x: usize,
    pub d_y: usize,
    pub m: usize,
    pub k: usize,
    pub depth: usize,
    pub feature_stats: Standardizer,
    pub target_stats: Standardizer,
    pub backbone: BackboneRecord,
    pub trees: Vec<TreeRecord>,
}

impl ModelFile {
    pub fn from_regressor(model: &Regressor) -> Self {
        let forest = model.forest();
        let bb = forest.backbone();
        let mut layers = Vec::new();
        let mut offset = 0;
        for (fan_in, fan_out) in bb.spec().layer_shapes() {
            let w = &bb.params()[offset..offset + fan_in * fan_out];
            let b = &bb.params()[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            layers.push(LayerParams {
                weights: w.chunks(fan_in).map(<[f64]>::to_vec).collect(),
                biases: b.to_vec(),
            });
        }
        let d_y = forest.target_dim();
        let trees = forest
            .trees()
            .iter()
            .map(|t| TreeRecord {
                unit_of_node: t.index_fn().units().to_vec(),
                leaves: t
                    .leaves()
                    .iter()
                    .map(|l| LeafRecord {
                        mean: l.mean().to_vec(),
                        cov: l.cov().chunks(d_y).map(<[f64]>::to_vec).collect(),
                    })
                    .collect(),
            })
            .collect();
        Self {
            format: FORMAT_NAME.to_string(),
            version: FORMAT_VERSION,
            d_x: forest.input_dim(),
            d_y,
            m: forest.output_units(),
            k: forest.trees().len(),
            depth: forest.trees()[0].topology().depth(),
            feature_stats: model.feature_scaler().clone(),
            target_stats: model.target_scaler().clone(),
            backbone: BackboneRecord {
                input_dim: bb.spec().input_dim,
                hidden: bb.spec().hidden.clone(),
                output_dim: bb.spec().output_dim,
                layers,
            },
            trees,
        }
    }

    pub fn into_regressor(self) -> Result<Regressor> {
        if self.format != FORMAT_NAME {
            return Err(DrfError::ModelFormat(format!(
                "unexpected format tag {:?}",
                self.format
            )));
        }
        if self.version != FORMAT_VERSION {
            return Err(DrfError::UnsupportedVersion {
                found: self.version,
                supported: FORMAT_VERSION,
            });
        }
        let spec = BackboneSpec::mlp(
            self.backbone.input_dim,
            self.backbone.hidden.clone(),
            self.backbone.output_dim,
        );
        if spec.input_dim != self.d_x || spec.output_dim != self.m {
            return Err(DrfError::ModelFormat("backbone dimensions disagree with header".into()));
        }
        let shapes = spec.layer_shapes();
        if shapes.len() != self.backbone.layers.len() {
            return Err(DrfError::ModelFormat(format!(
                "expected {} backbone layers, found {}",
                shapes.len(),
                self.backbone.layers.len()
            )));
        }
        let mut params = Vec::with_capacity(spec.param_count());
        for (l, (&(fan_in, fan_out), layer)) in shapes.iter().zip(&self.backbone.layers).enumerate() {
            if layer.weights.len() != fan_out
                || layer.weights.iter().any(|r| r.len() != fan_in)
                || layer.biases.len() != fan_out
            {
                return Err(DrfError::ModelFormat(format!("layer {l} has the wrong shape")));
            }
            params.extend(layer.weights.iter().flatten());
            params.extend(&layer.biases);
        }
        let backbone = Backbone::from_params(spec, params)?;

        if self.trees.len() != self.k {
            return Err(DrfError::ModelFormat(format!(
                "header says {} trees, found {}",
                self.k,
                self.trees.len()
            )));
        }
        let topology = TreeTopology::new(self.depth)?;
        let trees = self
            .trees
            .into_iter()
            .map(|t| {
                let phi = IndexFunction::new(t.unit_of_node, self.m)?;
                let leaves = t
                    .leaves
                    .into_iter()
                    .map(|l| {
                        if l.mean.len() != self.d_y || l.cov.iter().any(|r| r.len() != self.d_y) {
                            return Err(DrfError::ModelFormat("leaf has the wrong dimension".into()));
                        }
                        LeafGaussian::new(l.mean, l.cov.into_iter().flatten().collect(), 0.0)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Tree::new(topology, phi, leaves)
            })
            .collect::<Result<Vec<_>>>()?;
        let forest = ForestModel::new(backbone, trees, self.d_y)?;
        Regressor::new(forest, self.feature_stats, self.target_stats)
    }
}

pub fn to_json_string(model: &Regressor) -> Result<String> {
    let mut text = serde_json::to_string_pretty(&ModelFile::from_regressor(model))?;
    text.push('\n');
    Ok(text)
}

pub fn from_json_str(text: &str) -> Result<Regressor> {
    let file: ModelFile = serde_json::from_str(text)?;
    file.into_regressor()
}

pub fn save_model(model: &Regressor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_json_string(model)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Regressor> {
    from_json_str(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model() -> Regressor {
        let spec = BackboneSpec::mlp(2, vec![3], 4);
        let bb = Backbone::new_seeded(spec, 5).unwrap();
        let topo = TreeTopology::new(1).unwrap();
        let leaves = vec![
            LeafGaussian::new(vec![0.1, -0.2], vec![1.0, 0.3, 0.3, 0.5], 1e-4).unwrap(),
            LeafGaussian::new(vec![1.0 / 3.0, 2.0], vec![0.7, 0.0, 0.0, 0.2], 1e-4).unwrap(),
        ];
        let tree = Tree::new(topo, IndexFunction::new(vec![3], 4).unwrap(), leaves).unwrap();
        let forest = ForestModel::new(bb, vec![tree], 2).unwrap();
        let fs = Standardizer {
            mean: vec![0.5, -1.0],
            std: vec![2.0, 0.1],
            constant: vec![false, false],
        };
        Regressor::new(forest, fs, Standardizer::identity(2)).unwrap()
    }

    #[test]
    fn round_trip_preserves_everything() {
        let model = tiny_model();
        let text = to_json_string(&model).unwrap();
        let back = from_json_str(&text).unwrap();
        assert_eq!(back.forest().backbone().params(), model.forest().backbone().params());
        assert_eq!(
            back.forest().trees()[0].leaves()[1].mean(),
            model.forest().trees()[0].leaves()[1].mean()
        );
        assert_eq!(to_json_string(&back).unwrap(), text);
        let x = [0.3, 0.9];
        assert_eq!(back.predict_row(&x).unwrap(), model.predict_row(&x).unwrap());
    }

    #[test]
    fn unknown_version_rejected() {
        let text = to_json_string(&tiny_model())
            .unwrap()
            .replace("\"version\": 1", "\"version\": 99");
        assert!(matches!(
            from_json_str(&text),
            Err(DrfError::UnsupportedVersion { found: 99, .. })
        ));
    }

    #[test]
    fn malformed_shapes_rejected() {
        let mut file = ModelFile::from_regressor(&tiny_model());
        file.trees[0].unit_of_node = vec![9];
        assert!(file.into_regressor().is_err());
        let mut file = ModelFile::from_regressor(&tiny_model());
        file.backbone.layers[0].biases.pop();
        assert!(file.into_regressor().is_err());
    }
}
