//! Helpers shared by the integration tests.
#![allow(dead_code)]

use drf_core::backbone::{Backbone, BackboneSpec};
use drf_core::data::Dataset;
use drf_core::forest::{ForestModel, IndexFunction, LeafGaussian, Tree, TreeTopology, DEFAULT_COV_EPSILON};
use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| scale * normal(rng))
}

/// Gaussian with mean ~ N(0, 1) and covariance `A Aᵀ + 0.3 I`.
pub fn random_leaf(rng: &mut ChaCha8Rng, dim: usize) -> LeafGaussian {
    let mean: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
    let a: Vec<f64> = (0..dim * dim).map(|_| 0.5 * normal(rng)).collect();
    let mut cov = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..dim {
            cov[i * dim + j] = (0..dim).map(|k| a[i * dim + k] * a[j * dim + k]).sum::<f64>();
        }
        cov[i * dim + i] += 0.3;
    }
    LeafGaussian::new(mean, cov, DEFAULT_COV_EPSILON).expect("positive definite")
}

pub fn random_tree(rng: &mut ChaCha8Rng, depth: usize, units: usize, dim: usize) -> Tree {
    let topology = TreeTopology::new(depth).unwrap();
    let phi = IndexFunction::random(&topology, units, rng);
    let leaves = (0..topology.leaf_count()).map(|_| random_leaf(rng, dim)).collect();
    Tree::new(topology, phi, leaves).unwrap()
}

/// Forest with every backbone parameter (biases included) drawn from
/// `N(0, param_scale²)`.
#[allow(clippy::too_many_arguments)]
pub fn random_forest(
    rng: &mut ChaCha8Rng,
    input_dim: usize,
    hidden: Vec<usize>,
    units: usize,
    trees: usize,
    depth: usize,
    target_dim: usize,
    param_scale: f64,
) -> ForestModel {
    let spec = BackboneSpec::mlp(input_dim, hidden, units);
    let params = (0..spec.param_count()).map(|_| param_scale * normal(rng)).collect();
    let backbone = Backbone::from_params(spec, params).unwrap();
    let trees = (0..trees).map(|_| random_tree(rng, depth, units, target_dim)).collect();
    ForestModel::new(backbone, trees, target_dim).unwrap()
}

/// Ordinary least squares with intercept, fit on `train`, returning the
/// predictions for `x`.
pub fn ols_predict(train: &Dataset, x: ArrayView2<f64>) -> Array2<f64> {
    let n = train.len();
    let p = train.feature_dim() + 1;
    let design = |m: ArrayView2<f64>| DMatrix::from_fn(m.nrows(), p, |i, j| if j == 0 { 1.0 } else { m[[i, j - 1]] });
    let a = design(train.features());
    let gram = a.transpose() * &a;
    let solver = gram.cholesky().expect("full rank design");
    let xq = design(x);
    let mut out = Array2::zeros((x.nrows(), train.target_dim()));
    for t in 0..train.target_dim() {
        let y = DVector::from_fn(n, |i, _| train.targets()[[i, t]]);
        let beta = solver.solve(&(a.transpose() * y));
        let pred = &xq * beta;
        for i in 0..x.nrows() {
            out[[i, t]] = pred[i];
        }
    }
    out
}
