//! Leaf-distribution learning with the split parameters held fixed.
//!
//! Each iteration recomputes the responsibilities ζ of every leaf for every
//! sample from the current leaves, then sets each leaf's mean to the
//! ζ-weighted mean of the targets and its covariance to the ζ-weighted
//! scatter about that new mean. Routing is frozen for the whole call, so each
//! iteration minimizes a Jensen upper bound that is tight at the current
//! leaves and the tree NLL cannot increase.

use ndarray::ArrayView2;
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{DrfError, Result};
use crate::forest::{posterior_unchecked, LeafGaussian, LeafPosterior, RoutingDistribution, Tree};
use crate::math::LOG_DENSITY_FLOOR;

/// Leaves whose total responsibility is below this are left unchanged.
pub const STARVED_WEIGHT: f64 = 1e-12;

const KMEANS_MAX_ITER: usize = 100;
const KMEANS_TOL: f64 = 1e-8;

/// Per-leaf responsibilities of one sample; they sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ZetaWeights {
    pub weights: Vec<f64>,
    /// Set when the tree density was at the floor and the weights are uniform.
    pub at_floor: bool,
}

pub fn compute_zeta(routing: &RoutingDistribution, leaves: &[LeafGaussian], y: &[f64]) -> Result<ZetaWeights> {
    let LeafPosterior { weights, at_floor, .. } = crate::forest::leaf_posterior(routing, leaves, y)?;
    Ok(ZetaWeights { weights, at_floor })
}

/// Cluster labels and centers from k-means.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(point, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding. Ties go to the lowest center
/// index; an empty cluster is reseeded at the point farthest from its center.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<ClusterAssignment> {
    let n = points.len();
    if k == 0 || n < k {
        return Err(DrfError::InsufficientSamples {
            needed: k.max(1),
            available: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut chosen = vec![false; n];
    let first = rand::Rng::random_range(&mut rng, 0..n);
    centers.push(points[first].clone());
    chosen[first] = true;
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(&mut rng),
            // every remaining point coincides with a center
            Err(_) => (0..n).find(|&i| !chosen[i]).expect("n >= k"),
        };
        chosen[next] = true;
        centers.push(points[next].clone());
        let c = centers.last().expect("just pushed");
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, c));
        }
    }

    let dim = points[0].len();
    let mut labels = vec![0; n];
    let mut iterations = 0;
    for it in 0..KMEANS_MAX_ITER {
        iterations = it + 1;
        let mut dists = vec![0.0; n];
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p, &centers);
            labels[i] = c;
            dists[i] = d;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&labels) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut moved = 0.0f64;
        for c in 0..k {
            let new_center = if counts[c] == 0 {
                let far = (0..n)
                    .fold((0, f64::NEG_INFINITY), |best, i| {
                        if dists[i] > best.1 {
                            (i, dists[i])
                        } else {
                            best
                        }
                    })
                    .0;
                dists[far] = 0.0;
                points[far].clone()
            } else {
                sums[c].iter().map(|s| s / counts[c] as f64).collect()
            };
            moved = moved.max(sq_dist(&new_center, &centers[c]).sqrt());
            centers[c] = new_center;
        }
        if moved < KMEANS_TOL {
            break;
        }
    }
    for (i, p) in points.iter().enumerate() {
        labels[i] = nearest(p, &centers).0;
    }
    Ok(ClusterAssignment {
        labels,
        centers,
        iterations,
    })
}

/// Initial leaves from k-means over the targets: each cluster's member mean
/// and population covariance, floored at `cov_epsilon`, sorted by the first
/// mean coordinate.
pub fn kmeans_init(
    targets: ArrayView2<f64>,
    leaf_count: usize,
    seed: u64,
    cov_epsilon: f64,
) -> Result<Vec<LeafGaussian>> {
    let n = targets.nrows();
    if n < leaf_count {
        return Err(DrfError::InsufficientSamples {
            needed: leaf_count,
            available: n,
        });
    }
    let points: Vec<Vec<f64>> = targets.outer_iter().map(|r| r.to_vec()).collect();
    let clusters = kmeans(&points, leaf_count, seed)?;
    let d = targets.ncols();

    let mut leaves = Vec::with_capacity(leaf_count);
    for c in 0..leaf_count {
        let members: Vec<&Vec<f64>> = points
            .iter()
            .zip(&clusters.labels)
            .filter(|(_, &l)| l == c)
            .map(|(p, _)| p)
            .collect();
        let (mean, cov) = if members.is_empty() {
            (clusters.centers[c].clone(), vec![0.0; d * d])
        } else {
            let count = members.len() as f64;
            let mut mean = vec![0.0; d];
            for p in &members {
                for (m, v) in mean.iter_mut().zip(p.iter()) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= count);
            let mut cov = vec![0.0; d * d];
            for p in &members {
                for i in 0..d {
                    for j in 0..d {
                        cov[i * d + j] += (p[i] - mean[i]) * (p[j] - mean[j]);
                    }
                }
            }
            cov.iter_mut().for_each(|v| *v /= count);
            (mean, cov)
        };
        leaves.push(LeafGaussian::new(mean, cov, cov_epsilon)?);
    }
    leaves.sort_by(|a, b| a.mean()[0].total_cmp(&b.mean()[0]));
    Ok(leaves)
}

/// Leaf tables for `trees` trees from one k-means result. With `permute`,
/// each tree receives the clusters in its own seeded random order.
pub fn assign_leaves_to_trees(
    leaves: &[LeafGaussian],
    trees: usize,
    permute: bool,
    seed: u64,
) -> Vec<Vec<LeafGaussian>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..trees)
        .map(|_| {
            let mut table = leaves.to_vec();
            if permute {
                table.shuffle(&mut rng);
            }
            table
        })
        .collect()
}

/// Running sums of one leaf over a set of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafAccumulator {
    pub weight: f64,
    pub weighted_sum: Vec<f64>,
    pub scatter: Vec<f64>,
}

/// Outcome of one [`update_leaves`] call.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafUpdateReport {
    /// Tree NLL before the first iteration and after every iteration.
    pub nll_trace: Vec<f64>,
    /// Leaf refits skipped because the leaf had no responsibility mass.
    pub starved: usize,
    /// Leaf refits where the covariance floor changed the estimate.
    pub floor_activations: usize,
    /// Sample evaluations that hit the density floor.
    pub density_floor_hits: usize,
}

impl LeafUpdateReport {
    pub fn nll_before(&self) -> f64 {
        self.nll_trace[0]
    }

    pub fn nll_after(&self) -> f64 {
        *self.nll_trace.last().expect("trace is never empty")
    }
}

/// Responsibilities for every sample and the (clamped) tree NLL.
fn responsibilities(
    routings: &[RoutingDistribution],
    leaves: &[LeafGaussian],
    targets: &ArrayView2<f64>,
) -> (Vec<Vec<f64>>, f64, usize) {
    let posts: Vec<LeafPosterior> = routings
        .par_iter()
        .enumerate()
        .map(|(i, r)| posterior_unchecked(r, leaves, targets.row(i).as_slice().expect("standard layout")))
        .collect();
    let n = posts.len() as f64;
    let mut nll = 0.0;
    let mut floor_hits = 0;
    for p in &posts {
        nll -= p.log_density.max(LOG_DENSITY_FLOOR);
        floor_hits += usize::from(p.at_floor);
    }
    (posts.into_iter().map(|p| p.weights).collect(), nll / n, floor_hits)
}

/// Weighted mean and scatter about it, general `d`.
pub fn refit_leaf_matrix(zeta: &[f64], targets: &ArrayView2<f64>) -> LeafAccumulator {
    let d = targets.ncols();
    let mut weight = 0.0;
    let mut weighted_sum = vec![0.0; d];
    for (z, y) in zeta.iter().zip(targets.outer_iter()) {
        weight += z;
        for (s, v) in weighted_sum.iter_mut().zip(y.iter()) {
            *s += z * v;
        }
    }
    let mean: Vec<f64> = weighted_sum.iter().map(|s| s / weight).collect();
    let mut scatter = vec![0.0; d * d];
    for (z, y) in zeta.iter().zip(targets.outer_iter()) {
        for i in 0..d {
            let di = y[i] - mean[i];
            for j in 0..d {
                scatter[i * d + j] += z * di * (y[j] - mean[j]);
            }
        }
    }
    LeafAccumulator {
        weight,
        weighted_sum,
        scatter,
    }
}

/// Scalar-target version of [`refit_leaf_matrix`].
pub fn refit_leaf_scalar(zeta: &[f64], targets: &ArrayView2<f64>) -> LeafAccumulator {
    let column = targets.column(0);
    let mut weight = 0.0;
    let mut sum = 0.0;
    for (z, y) in zeta.iter().zip(column.iter()) {
        weight += z;
        sum += z * y;
    }
    let mean = sum / weight;
    let mut scatter = 0.0;
    for (z, y) in zeta.iter().zip(column.iter()) {
        let di = y - mean;
        scatter += z * di * di;
    }
    LeafAccumulator {
        weight,
        weighted_sum: vec![sum],
        scatter: vec![scatter],
    }
}

/// Runs `iterations` bound-minimization steps on one tree's leaves.
///
/// `routings[i]` is the frozen routing of sample `i` (row `i` of `targets`).
pub fn update_leaves(
    tree: &mut Tree,
    routings: &[RoutingDistribution],
    targets: ArrayView2<f64>,
    iterations: usize,
    cov_epsilon: f64,
) -> Result<LeafUpdateReport> {
    if iterations == 0 {
        return Err(DrfError::Config("leaf update needs at least one iteration".into()));
    }
    if routings.is_empty() {
        return Err(DrfError::EmptyDataset);
    }
    if routings.len() != targets.nrows() {
        return Err(DrfError::DimensionMismatch {
            what: "routing rows",
            expected: targets.nrows(),
            actual: routings.len(),
        });
    }
    let leaf_count = tree.topology().leaf_count();
    if let Some(r) = routings.iter().find(|r| r.leaf_count() != leaf_count) {
        return Err(DrfError::DimensionMismatch {
            what: "routing leaves",
            expected: leaf_count,
            actual: r.leaf_count(),
        });
    }
    let d = tree.leaves()[0].dim();
    if targets.ncols() != d {
        return Err(DrfError::DimensionMismatch {
            what: "target columns",
            expected: d,
            actual: targets.ncols(),
        });
    }
    if targets.iter().any(|v| !v.is_finite()) {
        return Err(DrfError::InvalidTarget("non-finite target in leaf update".into()));
    }
    let targets = targets.as_standard_layout();
    let targets = targets.view();

    let mut report = LeafUpdateReport {
        nll_trace: Vec::with_capacity(iterations + 1),
        starved: 0,
        floor_activations: 0,
        density_floor_hits: 0,
    };
    let (mut zeta, nll, hits) = responsibilities(routings, tree.leaves(), &targets);
    report.nll_trace.push(nll);
    report.density_floor_hits += hits;

    for _ in 0..iterations {
        let mut leaves = tree.leaves().to_vec();
        for (l, leaf) in leaves.iter_mut().enumerate() {
            let column: Vec<f64> = zeta.iter().map(|row| row[l]).collect();
            let acc = if d == 1 {
                refit_leaf_scalar(&column, &targets)
            } else {
                refit_leaf_matrix(&column, &targets)
            };
            if !(acc.weight >= STARVED_WEIGHT) {
                report.starved += 1;
                continue;
            }
            let mean = acc.weighted_sum.iter().map(|s| s / acc.weight).collect();
            let cov = acc.scatter.iter().map(|s| s / acc.weight).collect();
            let refit = LeafGaussian::new(mean, cov, cov_epsilon)?;
            report.floor_activations += usize::from(refit.floored());
            *leaf = refit;
        }
        tree.set_leaves(leaves)?;
        let (next, nll, hits) = responsibilities(routings, tree.leaves(), &targets);
        zeta = next;
        report.nll_trace.push(nll);
        report.density_floor_hits += hits;
    }
    if report.starved > 0 {
        log::debug!("leaf update left {} starved leaf refits unchanged", report.starved);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::{route_activations, IndexFunction, SplitActivations, TreeTopology};
    use approx::assert_relative_eq;
    use ndarray::{array, Array2};
    use rand_distr::{Normal, Uniform};

    fn column(values: &[f64]) -> Array2<f64> {
        Array2::from_shape_vec((values.len(), 1), values.to_vec()).unwrap()
    }

    #[test]
    fn kmeans_two_point_clusters() {
        let leaves = kmeans_init(column(&[1.0, 1.0, 9.0, 9.0]).view(), 2, 0, 1e-4).unwrap();
        assert_eq!(leaves[0].mean(), &[1.0]);
        assert_eq!(leaves[1].mean(), &[9.0]);
        assert_eq!(leaves[0].cov(), &[1e-4]);
        assert_eq!(leaves[1].cov(), &[1e-4]);
        assert!(leaves.iter().all(|l| l.floored()));
    }

    #[test]
    fn kmeans_one_point_per_cluster() {
        let grid: Vec<f64> = (0..64).map(|v| v as f64).collect();
        let leaves = kmeans_init(column(&grid).view(), 64, 11, 1e-4).unwrap();
        for (l, g) in leaves.iter().zip(&grid) {
            assert_eq!(l.mean(), &[*g]);
        }
    }

    #[test]
    fn kmeans_recovers_generating_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let a = Normal::new(0.0, 1.0).unwrap();
        let b = Normal::new(10.0, 1.0).unwrap();
        let mut ys: Vec<f64> = (0..200).map(|_| a.sample(&mut rng)).collect();
        ys.extend((0..200).map(|_| b.sample(&mut rng)));
        let leaves = kmeans_init(column(&ys).view(), 2, 5, 1e-4).unwrap();
        assert!((leaves[0].mean()[0] - 0.0).abs() < 0.5);
        assert!((leaves[1].mean()[0] - 10.0).abs() < 0.5);
    }

    #[test]
    fn kmeans_requires_enough_samples() {
        let err = kmeans_init(column(&[1.0, 2.0]).view(), 4, 0, 1e-4).unwrap_err();
        assert!(err.to_string().contains("insufficient samples for initialization"));
    }

    #[test]
    fn kmeans_is_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = Uniform::new(-3.0, 3.0).unwrap();
        let pts: Vec<Vec<f64>> = (0..100).map(|_| vec![u.sample(&mut rng), u.sample(&mut rng)]).collect();
        let a = kmeans(&pts, 8, 77).unwrap();
        let b = kmeans(&pts, 8, 77).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.labels.len(), 100);
    }

    #[test]
    fn permuted_assignment_keeps_the_cluster_set() {
        let leaves = kmeans_init(column(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]).view(), 4, 0, 1e-4).unwrap();
        let tables = assign_leaves_to_trees(&leaves, 3, true, 9);
        for t in &tables {
            let mut means: Vec<f64> = t.iter().map(|l| l.mean()[0]).collect();
            means.sort_by(f64::total_cmp);
            let expected: Vec<f64> = leaves.iter().map(|l| l.mean()[0]).collect();
            assert_eq!(means, expected);
        }
        let same = assign_leaves_to_trees(&leaves, 2, false, 9);
        assert_eq!(same[0], leaves);
        assert_eq!(same[1], leaves);
    }

    #[test]
    fn zeta_examples() {
        let t = TreeTopology::new(2).unwrap();
        let r = route_activations(&t, &SplitActivations::from_probabilities(&[0.8, 0.6, 0.3]).unwrap()).unwrap();
        let leaves: Vec<_> = [0.1, 0.2, 0.3, 0.4]
            .iter()
            .map(|&d: &f64| LeafGaussian::isotropic(vec![0.0], 1.0 / (2.0 * std::f64::consts::PI * d * d)).unwrap())
            .collect();
        let z = compute_zeta(&r, &leaves, &[0.0]).unwrap();
        for (v, e) in z.weights.iter().zip([0.2581, 0.3441, 0.0968, 0.3011]) {
            assert_relative_eq!(*v, e, epsilon = 1e-4);
        }
        assert_relative_eq!(z.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-12);

        let one_hot = RoutingDistribution::from_leaf_probabilities(vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let z = compute_zeta(&one_hot, &leaves, &[0.0]).unwrap();
        assert_eq!(z.weights, vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn weighted_mean_from_two_samples() {
        let acc = refit_leaf_scalar(&[0.25, 0.75], &array![[2.0], [4.0]].view());
        assert_eq!(acc.weighted_sum[0] / acc.weight, 3.5);
    }

    #[test]
    fn scalar_and_matrix_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let u = Uniform::new(-4.0, 4.0).unwrap();
        let w = Uniform::new(0.0, 1.0).unwrap();
        let ys = Array2::from_shape_fn((50, 1), |_| u.sample(&mut rng));
        let zeta: Vec<f64> = (0..50).map(|_| w.sample(&mut rng)).collect();
        let a = refit_leaf_scalar(&zeta, &ys.view());
        let b = refit_leaf_matrix(&zeta, &ys.view());
        assert!((a.weight - b.weight).abs() < 1e-12);
        assert!((a.weighted_sum[0] - b.weighted_sum[0]).abs() < 1e-12);
        assert!((a.scatter[0] - b.scatter[0]).abs() < 1e-12);
    }

    #[test]
    fn starved_leaf_is_unchanged() {
        let t = TreeTopology::new(1).unwrap();
        let leaves = vec![
            LeafGaussian::isotropic(vec![0.0], 1.0).unwrap(),
            LeafGaussian::isotropic(vec![5.0], 1.0).unwrap(),
        ];
        let mut tree = Tree::new(t, IndexFunction::new(vec![0], 1).unwrap(), leaves.clone()).unwrap();
        let routing = RoutingDistribution::from_leaf_probabilities(vec![1.0, 0.0]).unwrap();
        let ys = array![[0.5], [-0.5], [1.0]];
        let report = update_leaves(&mut tree, &vec![routing; 3], ys.view(), 3, 1e-4).unwrap();
        assert_eq!(report.starved, 3);
        assert_eq!(tree.leaves()[1], leaves[1]);
        assert_relative_eq!(tree.leaves()[0].mean()[0], 1.0 / 3.0, epsilon = 1e-15);
        assert_eq!(report.nll_trace.len(), 4);
    }

    #[test]
    fn update_rejects_bad_input() {
        let t = TreeTopology::new(1).unwrap();
        let leaves = vec![LeafGaussian::isotropic(vec![0.0], 1.0).unwrap(); 2];
        let mut tree = Tree::new(t, IndexFunction::new(vec![0], 1).unwrap(), leaves).unwrap();
        let routing = RoutingDistribution::from_leaf_probabilities(vec![0.5, 0.5]).unwrap();
        assert!(update_leaves(&mut tree, std::slice::from_ref(&routing), array![[0.0]].view(), 0, 1e-4).is_err());
        assert!(update_leaves(
            &mut tree,
            std::slice::from_ref(&routing),
            array![[0.0], [1.0]].view(),
            1,
            1e-4
        )
        .is_err());
        assert!(update_leaves(&mut tree, &[routing], array![[f64::NAN]].view(), 1, 1e-4).is_err());
    }
}
