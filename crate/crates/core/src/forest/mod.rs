//! Soft-routed regression trees with Gaussian leaves.
//!
//! A split node `n` sends a sample left with probability
//! `s_n = sigmoid(f[unit(n)])` and right with `1 - s_n`. The probability of
//! reaching a leaf is the product of branch probabilities along its path, and
//! a tree's conditional density is the routing-weighted mixture of its leaf
//! Gaussians. All mixture arithmetic is done in the log domain.

mod gaussian;
mod model;
mod topology;

pub use gaussian::{LeafGaussian, DEFAULT_COV_EPSILON};
pub use model::{ForestModel, NllValue, Tree};
pub use topology::{IndexFunction, TreeTopology, MAX_DEPTH};

use crate::error::{DrfError, Result};
use crate::math::{self, LOG_DENSITY_FLOOR};

/// Branch probabilities of every split node for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitActivations {
    left: Vec<f64>,
    right: Vec<f64>,
    log_left: Vec<f64>,
    log_right: Vec<f64>,
}

impl SplitActivations {
    /// Activations from backbone outputs through an index function.
    ///
    /// The right-branch probability is evaluated as `sigmoid(-z)` rather than
    /// `1 - sigmoid(z)` so it keeps full relative precision.
    pub fn from_outputs(index_fn: &IndexFunction, f_out: &[f64]) -> Result<Self> {
        if f_out.iter().any(|v| !v.is_finite()) {
            return Err(DrfError::InvalidTarget("non-finite backbone output".into()));
        }
        if let Some(&u) = index_fn.units().iter().find(|&&u| u >= f_out.len()) {
            return Err(DrfError::DimensionMismatch {
                what: "backbone outputs",
                expected: u + 1,
                actual: f_out.len(),
            });
        }
        let n = index_fn.len();
        let mut out = Self {
            left: Vec::with_capacity(n),
            right: Vec::with_capacity(n),
            log_left: Vec::with_capacity(n),
            log_right: Vec::with_capacity(n),
        };
        for &u in index_fn.units() {
            let z = f_out[u];
            out.left.push(math::sigmoid(z));
            out.right.push(math::sigmoid(-z));
            out.log_left.push(math::log_sigmoid(z));
            out.log_right.push(math::log_sigmoid(-z));
        }
        Ok(out)
    }

    /// Activations given directly as left-branch probabilities in `[0, 1]`.
    pub fn from_probabilities(left: &[f64]) -> Result<Self> {
        if left.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(DrfError::Config("split probabilities must lie in [0, 1]".into()));
        }
        let right: Vec<f64> = left.iter().map(|s| 1.0 - s).collect();
        Ok(Self {
            log_left: left.iter().map(|s| s.ln()).collect(),
            log_right: right.iter().map(|s| s.ln()).collect(),
            left: left.to_vec(),
            right,
        })
    }

    /// Left-branch probabilities `s_n`.
    pub fn left(&self) -> &[f64] {
        &self.left
    }

    /// Right-branch probabilities `1 - s_n`.
    pub fn right(&self) -> &[f64] {
        &self.right
    }

    pub fn len(&self) -> usize {
        self.left.len()
    }

    pub fn is_empty(&self) -> bool {
        self.left.is_empty()
    }
}

/// Probability of reaching each leaf, kept in both linear and log form.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDistribution {
    p_leaf: Vec<f64>,
    log_p_leaf: Vec<f64>,
}

impl RoutingDistribution {
    pub fn probabilities(&self) -> &[f64] {
        &self.p_leaf
    }

    pub fn log_probabilities(&self) -> &[f64] {
        &self.log_p_leaf
    }

    pub fn leaf_count(&self) -> usize {
        self.p_leaf.len()
    }

    /// Routing that puts the given probabilities directly on the leaves.
    pub fn from_leaf_probabilities(p_leaf: Vec<f64>) -> Result<Self> {
        if p_leaf.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(DrfError::Config("leaf probabilities must lie in [0, 1]".into()));
        }
        let total: f64 = p_leaf.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(DrfError::Config(format!("leaf probabilities sum to {total}")));
        }
        Ok(Self {
            log_p_leaf: p_leaf.iter().map(|p| p.ln()).collect(),
            p_leaf,
        })
    }
}

/// Routes one sample through a tree given the backbone output.
pub fn route(
    topology: &TreeTopology,
    index_fn: &IndexFunction,
    f_out: &[f64],
) -> Result<(SplitActivations, RoutingDistribution)> {
    if index_fn.len() != topology.split_count() {
        return Err(DrfError::DimensionMismatch {
            what: "index function entries",
            expected: topology.split_count(),
            actual: index_fn.len(),
        });
    }
    let act = SplitActivations::from_outputs(index_fn, f_out)?;
    let routing = route_activations(topology, &act)?;
    Ok((act, routing))
}

/// Top-down pass: each node's probability is its parent's times the branch
/// factor.
pub fn route_activations(topology: &TreeTopology, act: &SplitActivations) -> Result<RoutingDistribution> {
    let splits = topology.split_count();
    if act.len() != splits {
        return Err(DrfError::DimensionMismatch {
            what: "split activations",
            expected: splits,
            actual: act.len(),
        });
    }
    let nodes = topology.node_count();
    let mut prob = vec![0.0; nodes];
    let mut log_prob = vec![0.0; nodes];
    prob[0] = 1.0;
    for n in 0..splits {
        let (l, r) = (TreeTopology::left_child(n), TreeTopology::right_child(n));
        prob[l] = prob[n] * act.left[n];
        prob[r] = prob[n] * act.right[n];
        log_prob[l] = log_prob[n] + act.log_left[n];
        log_prob[r] = log_prob[n] + act.log_right[n];
    }
    Ok(RoutingDistribution {
        p_leaf: prob.split_off(splits),
        log_p_leaf: log_prob.split_off(splits),
    })
}

/// `p(y | x)` of one tree and its logarithm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureDensity {
    pub density: f64,
    pub log_density: f64,
}

fn check_leaves(routing: &RoutingDistribution, leaves: &[LeafGaussian], y: &[f64]) -> Result<()> {
    if leaves.len() != routing.leaf_count() {
        return Err(DrfError::DimensionMismatch {
            what: "leaf count",
            expected: routing.leaf_count(),
            actual: leaves.len(),
        });
    }
    let d = leaves.first().map(|l| l.dim()).unwrap_or(0);
    if y.len() != d {
        return Err(DrfError::DimensionMismatch {
            what: "target length",
            expected: d,
            actual: y.len(),
        });
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(DrfError::InvalidTarget(format!("{y:?}")));
    }
    Ok(())
}

/// `ln P(l) + ln π_l(y)` for every leaf.
pub(crate) fn joint_log_terms(routing: &RoutingDistribution, leaves: &[LeafGaussian], y: &[f64]) -> Vec<f64> {
    routing
        .log_p_leaf
        .iter()
        .zip(leaves)
        .map(|(lp, leaf)| lp + leaf.log_density_unchecked(y))
        .collect()
}

pub fn tree_conditional_density(
    routing: &RoutingDistribution,
    leaves: &[LeafGaussian],
    y: &[f64],
) -> Result<MixtureDensity> {
    check_leaves(routing, leaves, y)?;
    let log_density = math::log_sum_exp(&joint_log_terms(routing, leaves, y));
    Ok(MixtureDensity {
        density: log_density.exp(),
        log_density,
    })
}

/// Expected target of one tree: `Σ_l P(l) μ_l`.
pub fn tree_predict(routing: &RoutingDistribution, leaves: &[LeafGaussian]) -> Vec<f64> {
    let d = leaves.first().map(|l| l.dim()).unwrap_or(0);
    let mut out = vec![0.0; d];
    for (p, leaf) in routing.p_leaf.iter().zip(leaves) {
        for (o, m) in out.iter_mut().zip(leaf.mean()) {
            *o += p * m;
        }
    }
    out
}

/// Posterior leaf weights `P(l) π_l(y) / p(y|x)` of one sample.
///
/// When the mixture density is at or below the log-density floor the weights
/// fall back to uniform and `at_floor` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafPosterior {
    pub log_density: f64,
    pub weights: Vec<f64>,
    pub at_floor: bool,
}

pub(crate) fn posterior_unchecked(routing: &RoutingDistribution, leaves: &[LeafGaussian], y: &[f64]) -> LeafPosterior {
    let terms = joint_log_terms(routing, leaves, y);
    let log_density = math::log_sum_exp(&terms);
    if log_density > LOG_DENSITY_FLOOR {
        LeafPosterior {
            log_density,
            weights: terms.iter().map(|t| (t - log_density).exp()).collect(),
            at_floor: false,
        }
    } else {
        let u = 1.0 / terms.len() as f64;
        LeafPosterior {
            log_density,
            weights: vec![u; terms.len()],
            at_floor: true,
        }
    }
}

pub fn leaf_posterior(routing: &RoutingDistribution, leaves: &[LeafGaussian], y: &[f64]) -> Result<LeafPosterior> {
    check_leaves(routing, leaves, y)?;
    Ok(posterior_unchecked(routing, leaves, y))
}

/// Γ for every node of a tree, heap-ordered.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaTable {
    pub values: Vec<f64>,
    pub at_floor: bool,
}

/// Γ at the leaves is the posterior weight; every split node sums its two
/// children, filled from the last split node back to the root.
pub fn gamma_bottom_up(
    topology: &TreeTopology,
    routing: &RoutingDistribution,
    leaves: &[LeafGaussian],
    y: &[f64],
) -> Result<GammaTable> {
    if routing.leaf_count() != topology.leaf_count() {
        return Err(DrfError::DimensionMismatch {
            what: "routing leaves",
            expected: topology.leaf_count(),
            actual: routing.leaf_count(),
        });
    }
    let post = leaf_posterior(routing, leaves, y)?;
    Ok(gamma_from_posterior(topology, &post))
}

pub(crate) fn gamma_from_posterior(topology: &TreeTopology, post: &LeafPosterior) -> GammaTable {
    let splits = topology.split_count();
    let mut values = vec![0.0; topology.node_count()];
    values[splits..].copy_from_slice(&post.weights);
    for n in (0..splits).rev() {
        values[n] = values[TreeTopology::left_child(n)] + values[TreeTopology::right_child(n)];
    }
    GammaTable {
        values,
        at_floor: post.at_floor,
    }
}
