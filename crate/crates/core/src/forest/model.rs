use ndarray::{Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;

use super::{
    gamma_from_posterior, posterior_unchecked, route, tree_predict, IndexFunction, LeafGaussian, RoutingDistribution,
    TreeTopology,
};
use crate::backbone::{Backbone, ForwardCache};
use crate::error::{DrfError, Result};
use crate::math::LOG_DENSITY_FLOOR;

/// One tree: topology, index function and its own leaf table.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    topology: TreeTopology,
    index_fn: IndexFunction,
    leaves: Vec<LeafGaussian>,
}

impl Tree {
    pub fn new(topology: TreeTopology, index_fn: IndexFunction, leaves: Vec<LeafGaussian>) -> Result<Self> {
        if index_fn.len() != topology.split_count() {
            return Err(DrfError::DimensionMismatch {
                what: "index function entries",
                expected: topology.split_count(),
                actual: index_fn.len(),
            });
        }
        let mut tree = Self {
            topology,
            index_fn,
            leaves: Vec::new(),
        };
        tree.set_leaves(leaves)?;
        Ok(tree)
    }

    pub fn topology(&self) -> &TreeTopology {
        &self.topology
    }

    pub fn index_fn(&self) -> &IndexFunction {
        &self.index_fn
    }

    pub fn leaves(&self) -> &[LeafGaussian] {
        &self.leaves
    }

    pub fn set_leaves(&mut self, leaves: Vec<LeafGaussian>) -> Result<()> {
        if leaves.len() != self.topology.leaf_count() {
            return Err(DrfError::DimensionMismatch {
                what: "leaf count",
                expected: self.topology.leaf_count(),
                actual: leaves.len(),
            });
        }
        if let Some(first) = leaves.first() {
            if leaves.iter().any(|l| l.dim() != first.dim()) {
                return Err(DrfError::Covariance("leaves disagree on target dimension".into()));
            }
        }
        self.leaves = leaves;
        Ok(())
    }

    pub fn route(&self, f_out: &[f64]) -> Result<RoutingDistribution> {
        route(&self.topology, &self.index_fn, f_out).map(|(_, r)| r)
    }

    pub fn predict_from_output(&self, f_out: &[f64]) -> Result<Vec<f64>> {
        Ok(tree_predict(&self.route(f_out)?, &self.leaves))
    }
}

/// Forest negative log-likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct NllValue {
    /// Average of the per-tree losses.
    pub loss: f64,
    pub per_tree: Vec<f64>,
    /// Sample-tree pairs whose log-density was clamped at the floor.
    pub underflows: usize,
}

/// K trees sharing one backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct ForestModel {
    trees: Vec<Tree>,
    backbone: Backbone,
    target_dim: usize,
}

struct SampleTerms {
    log_density: Vec<f64>,
    underflows: usize,
    grad: Vec<f64>,
}

impl ForestModel {
    pub fn new(backbone: Backbone, trees: Vec<Tree>, target_dim: usize) -> Result<Self> {
        if trees.is_empty() {
            return Err(DrfError::Config("a forest needs at least one tree".into()));
        }
        for tree in &trees {
            if let Some(&u) = tree.index_fn.units().iter().find(|&&u| u >= backbone.output_dim()) {
                return Err(DrfError::Config(format!(
                    "index function refers to unit {u}, backbone has {} outputs",
                    backbone.output_dim()
                )));
            }
            if tree.leaves.iter().any(|l| l.dim() != target_dim) {
                return Err(DrfError::DimensionMismatch {
                    what: "leaf target dimension",
                    expected: target_dim,
                    actual: tree.leaves[0].dim(),
                });
            }
        }
        Ok(Self {
            trees,
            backbone,
            target_dim,
        })
    }

    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    pub fn tree_mut(&mut self, k: usize) -> &mut Tree {
        &mut self.trees[k]
    }

    pub(crate) fn trees_mut(&mut self) -> &mut [Tree] {
        &mut self.trees
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn backbone_mut(&mut self) -> &mut Backbone {
        &mut self.backbone
    }

    pub fn target_dim(&self) -> usize {
        self.target_dim
    }

    pub fn input_dim(&self) -> usize {
        self.backbone.input_dim()
    }

    pub fn output_units(&self) -> usize {
        self.backbone.output_dim()
    }

    fn check_inputs(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(DrfError::DimensionMismatch {
                what: "input features",
                expected: self.input_dim(),
                actual: x.ncols(),
            });
        }
        Ok(())
    }

    fn check_batch(&self, rows: usize, y: &ArrayView2<f64>) -> Result<()> {
        if rows == 0 {
            return Err(DrfError::EmptyDataset);
        }
        if y.nrows() != rows {
            return Err(DrfError::DimensionMismatch {
                what: "target rows",
                expected: rows,
                actual: y.nrows(),
            });
        }
        if y.ncols() != self.target_dim {
            return Err(DrfError::DimensionMismatch {
                what: "target columns",
                expected: self.target_dim,
                actual: y.ncols(),
            });
        }
        Ok(())
    }

    /// Average of the tree predictions from one shared backbone pass.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        let f_out = self.backbone.apply(x)?;
        self.predict_from_output(&f_out)
    }

    pub fn predict_from_output(&self, f_out: &[f64]) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.target_dim];
        for tree in &self.trees {
            for (a, p) in acc.iter_mut().zip(tree.predict_from_output(f_out)?) {
                *a += p;
            }
        }
        let k = self.trees.len() as f64;
        Ok(acc.into_iter().map(|a| a / k).collect())
    }

    pub fn predict_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_inputs(&x)?;
        let rows: Vec<Vec<f64>> = (0..x.nrows())
            .into_par_iter()
            .map(|i| self.predict(&x.row(i).to_vec()))
            .collect::<Result<_>>()?;
        Ok(rows_to_array(rows, self.target_dim))
    }

    /// Backbone outputs for every row, `N × M`.
    pub fn outputs(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_inputs(&x)?;
        let rows: Vec<Vec<f64>> = (0..x.nrows())
            .into_par_iter()
            .map(|i| self.backbone.apply(&x.row(i).to_vec()))
            .collect::<Result<_>>()?;
        Ok(rows_to_array(rows, self.output_units()))
    }

    /// Forward passes with caches, for a later backward.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Vec<ForwardCache>)> {
        self.check_inputs(&x)?;
        let passes: Vec<(Vec<f64>, ForwardCache)> = (0..x.nrows())
            .into_par_iter()
            .map(|i| self.backbone.forward(&x.row(i).to_vec()))
            .collect::<Result<_>>()?;
        let (rows, caches): (Vec<_>, Vec<_>) = passes.into_iter().unzip();
        Ok((rows_to_array(rows, self.output_units()), caches))
    }

    /// Per-tree log-densities (clamped) and the unscaled gradient row
    /// `Σ_k Σ_n (s_n Γ_right − (1 − s_n) Γ_left)` for one sample.
    fn sample_terms(&self, f_out: ArrayView1<f64>, y: ArrayView1<f64>, with_grad: bool) -> Result<SampleTerms> {
        let f_out = f_out.to_vec();
        let y = y.to_vec();
        if y.iter().any(|v| !v.is_finite()) {
            return Err(DrfError::InvalidTarget(format!("{y:?}")));
        }
        let mut log_density = Vec::with_capacity(self.trees.len());
        let mut underflows = 0;
        let mut grad = if with_grad { vec![0.0; f_out.len()] } else { Vec::new() };
        for tree in &self.trees {
            let (act, routing) = route(&tree.topology, &tree.index_fn, &f_out)?;
            let post = posterior_unchecked(&routing, &tree.leaves, &y);
            if post.at_floor {
                underflows += 1;
            }
            let lp = if post.log_density > LOG_DENSITY_FLOOR {
                post.log_density
            } else {
                LOG_DENSITY_FLOOR
            };
            log_density.push(lp);
            if with_grad {
                let gamma = gamma_from_posterior(&tree.topology, &post);
                for n in 0..tree.topology.split_count() {
                    let gl = gamma.values[TreeTopology::left_child(n)];
                    let gr = gamma.values[TreeTopology::right_child(n)];
                    grad[tree.index_fn.unit(n)] += act.left()[n] * gr - act.right()[n] * gl;
                }
            }
        }
        Ok(SampleTerms {
            log_density,
            underflows,
            grad,
        })
    }

    fn collect_terms(&self, f_out: ArrayView2<f64>, y: ArrayView2<f64>, with_grad: bool) -> Result<Vec<SampleTerms>> {
        self.check_batch(f_out.nrows(), &y)?;
        if f_out.ncols() != self.output_units() {
            return Err(DrfError::DimensionMismatch {
                what: "backbone outputs",
                expected: self.output_units(),
                actual: f_out.ncols(),
            });
        }
        (0..f_out.nrows())
            .into_par_iter()
            .map(|i| self.sample_terms(f_out.row(i), y.row(i), with_grad))
            .collect()
    }

    fn reduce_loss(&self, terms: &[SampleTerms]) -> NllValue {
        let n = terms.len() as f64;
        let per_tree: Vec<f64> = (0..self.trees.len())
            .map(|k| -terms.iter().map(|t| t.log_density[k]).sum::<f64>() / n)
            .collect();
        NllValue {
            loss: per_tree.iter().sum::<f64>() / per_tree.len() as f64,
            underflows: terms.iter().map(|t| t.underflows).sum(),
            per_tree,
        }
    }

    pub fn loss_from_outputs(&self, f_out: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<NllValue> {
        let terms = self.collect_terms(f_out, y, false)?;
        Ok(self.reduce_loss(&terms))
    }

    /// Loss and `∂R/∂f` (an `N × M` matrix) in one pass.
    pub fn loss_and_grad_from_outputs(
        &self,
        f_out: ArrayView2<f64>,
        y: ArrayView2<f64>,
    ) -> Result<(NllValue, Array2<f64>)> {
        let terms = self.collect_terms(f_out, y, true)?;
        let loss = self.reduce_loss(&terms);
        let scale = 1.0 / (terms.len() as f64 * self.trees.len() as f64);
        let mut grad = Array2::zeros((terms.len(), self.output_units()));
        for (mut row, t) in grad.outer_iter_mut().zip(&terms) {
            for (g, v) in row.iter_mut().zip(&t.grad) {
                *g = v * scale;
            }
        }
        Ok((loss, grad))
    }

    pub fn loss_nll(&self, x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<NllValue> {
        let f_out = self.outputs(x)?;
        self.loss_from_outputs(f_out.view(), y)
    }

    pub fn grad_loss_wrt_f(&self, x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<Array2<f64>> {
        let f_out = self.outputs(x)?;
        self.loss_and_grad_from_outputs(f_out.view(), y).map(|(_, g)| g)
    }

    /// `∂R/∂Θ` by composing the forest gradient with the backbone backward
    /// pass; summed over samples in row order.
    pub fn loss_and_param_grad(&self, x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<(NllValue, Vec<f64>)> {
        let (f_out, caches) = self.forward_batch(x)?;
        let (loss, grad_f) = self.loss_and_grad_from_outputs(f_out.view(), y)?;
        let per_sample: Vec<Vec<f64>> = caches
            .par_iter()
            .enumerate()
            .map(|(i, cache)| {
                let mut g = vec![0.0; self.backbone.params().len()];
                let row = grad_f.row(i).to_vec();
                self.backbone.backward_accumulate(cache, &row, &mut g).map(|_| g)
            })
            .collect::<Result<_>>()?;
        let mut total = vec![0.0; self.backbone.params().len()];
        for g in &per_sample {
            for (t, v) in total.iter_mut().zip(g) {
                *t += v;
            }
        }
        Ok((loss, total))
    }
}

pub(crate) fn rows_to_array(rows: Vec<Vec<f64>>, cols: usize) -> Array2<f64> {
    let n = rows.len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((n, cols), flat).expect("rows have uniform width")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneSpec;
    use approx::assert_relative_eq;
    use ndarray::array;

    fn single_leaf_pair(m0: f64, m1: f64) -> Vec<LeafGaussian> {
        vec![
            LeafGaussian::isotropic(vec![m0], 1.0).unwrap(),
            LeafGaussian::isotropic(vec![m1], 1.0).unwrap(),
        ]
    }

    fn zero_backbone(d_x: usize, m: usize) -> Backbone {
        let spec = BackboneSpec::linear(d_x, m);
        Backbone::from_params(spec.clone(), vec![0.0; spec.param_count()]).unwrap()
    }

    fn depth1_tree(unit: usize, leaves: Vec<LeafGaussian>) -> Tree {
        Tree::new(
            TreeTopology::new(1).unwrap(),
            IndexFunction::new(vec![unit], usize::MAX).unwrap(),
            leaves,
        )
        .unwrap()
    }

    #[test]
    fn forest_averages_tree_predictions() {
        // zero backbone → s = 0.5, tree prediction = mean of leaf means
        let trees = vec![
            depth1_tree(0, single_leaf_pair(2.0, 4.0)),
            depth1_tree(1, single_leaf_pair(4.0, 6.0)),
        ];
        let forest = ForestModel::new(zero_backbone(1, 2), trees, 1).unwrap();
        assert_eq!(forest.predict(&[0.3]).unwrap(), vec![4.0]);

        let trees = vec![
            depth1_tree(0, single_leaf_pair(1.0, 1.0)),
            depth1_tree(0, single_leaf_pair(2.0, 2.0)),
            depth1_tree(0, single_leaf_pair(6.0, 6.0)),
        ];
        let forest = ForestModel::new(zero_backbone(1, 1), trees, 1).unwrap();
        assert_eq!(forest.predict(&[0.0]).unwrap(), vec![3.0]);
        assert!(forest.predict(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn singleton_forest_matches_tree() {
        let tree = depth1_tree(0, single_leaf_pair(-1.0, 5.0));
        let spec = BackboneSpec::linear(2, 1);
        let bb = Backbone::from_params(spec, vec![0.4, -0.3, 0.1]).unwrap();
        let forest = ForestModel::new(bb.clone(), vec![tree.clone()], 1).unwrap();
        let x = [0.7, 1.9];
        let f = bb.apply(&x).unwrap();
        assert_eq!(forest.predict(&x).unwrap(), tree.predict_from_output(&f).unwrap());
    }

    #[test]
    fn loss_examples() {
        let tree = depth1_tree(0, single_leaf_pair(0.0, 0.0));
        let forest = ForestModel::new(zero_backbone(1, 1), vec![tree], 1).unwrap();
        let y = array![[0.0]];
        let nll = forest.loss_from_outputs(array![[0.0]].view(), y.view()).unwrap();
        assert_relative_eq!(nll.loss, 0.5 * crate::math::LN_2PI, epsilon = 1e-15);
        assert_eq!(nll.underflows, 0);
    }

    #[test]
    fn identical_leaves_give_zero_routing_gradient() {
        let tree = depth1_tree(0, single_leaf_pair(0.5, 0.5));
        let forest = ForestModel::new(zero_backbone(1, 1), vec![tree], 1).unwrap();
        let (_, g) = forest
            .loss_and_grad_from_outputs(array![[0.8], [-1.3]].view(), array![[0.1], [2.0]].view())
            .unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn identical_samples_give_identical_rows() {
        let tree = depth1_tree(0, single_leaf_pair(-1.0, 1.0));
        let forest = ForestModel::new(zero_backbone(1, 1), vec![tree], 1).unwrap();
        let f = array![[0.3], [0.3], [0.3]];
        let y = array![[0.2], [0.2], [0.2]];
        let (_, g) = forest.loss_and_grad_from_outputs(f.view(), y.view()).unwrap();
        assert_eq!(g[[0, 0]], g[[1, 0]]);
        assert_eq!(g[[1, 0]], g[[2, 0]]);
        assert!(g[[0, 0]] != 0.0);
    }

    #[test]
    fn underflow_clamps_and_counts() {
        let leaves = vec![
            LeafGaussian::isotropic(vec![0.0], 1e-4).unwrap(),
            LeafGaussian::isotropic(vec![0.0], 1e-4).unwrap(),
        ];
        let forest = ForestModel::new(zero_backbone(1, 1), vec![depth1_tree(0, leaves)], 1).unwrap();
        let nll = forest
            .loss_from_outputs(array![[0.0]].view(), array![[50.0]].view())
            .unwrap();
        assert_eq!(nll.loss, -LOG_DENSITY_FLOOR);
        assert_eq!(nll.underflows, 1);
    }

    #[test]
    fn rejects_mismatched_batches() {
        let forest =
            ForestModel::new(zero_backbone(1, 1), vec![depth1_tree(0, single_leaf_pair(0.0, 1.0))], 1).unwrap();
        let empty = Array2::<f64>::zeros((0, 1));
        assert!(matches!(
            forest.loss_from_outputs(empty.view(), empty.view()),
            Err(DrfError::EmptyDataset)
        ));
        assert!(forest
            .loss_from_outputs(array![[0.0]].view(), array![[0.0, 1.0]].view())
            .is_err());
    }
}
