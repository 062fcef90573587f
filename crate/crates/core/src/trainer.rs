//! Alternating optimization of a forest.
//!
//! Training proceeds in windows. A window draws `window_batches` random
//! mini-batches and takes one SGD step on the backbone for each, with the
//! leaves frozen. The samples of the window are then re-routed under the
//! current backbone and every tree refits its leaves on them, with the
//! backbone frozen.

use std::time::Instant;

use ndarray::ArrayView2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{sgd_step, Backbone, BackboneSpec, SgdSchedule, StepOutcome};
use crate::data::Dataset;
use crate::error::{DrfError, Result};
use crate::forest::{ForestModel, IndexFunction, RoutingDistribution, Tree, TreeTopology, DEFAULT_COV_EPSILON};
use crate::leaf::{assign_leaves_to_trees, kmeans_init, update_leaves, LeafUpdateReport};
use crate::metrics::{self, MetricsRecord, DEFAULT_CS_LEVEL};
use crate::regressor::Regressor;

const STALL_WINDOWS: usize = 5;
const EARLY_STOP_TOL: f64 = 1e-6;
const EARLY_STOP_WINDOWS: usize = 10;

fn default_output_units() -> usize {
    128
}
fn default_leaf_iterations() -> usize {
    20
}
fn default_window_batches() -> usize {
    50
}
fn default_batch_size() -> usize {
    16
}
fn default_max_iterations() -> u64 {
    30_000
}
fn default_learning_rate() -> f64 {
    0.05
}
fn default_lr_decay() -> f64 {
    0.5
}
fn default_lr_interval() -> u64 {
    10_000
}
fn default_cov_epsilon() -> f64 {
    DEFAULT_COV_EPSILON
}
fn default_true() -> bool {
    true
}

/// Training hyper-parameters. `trees` and `depth` must be given explicitly
/// in a config file; everything else has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub trees: usize,
    pub depth: usize,
    /// Backbone output width M.
    #[serde(default = "default_output_units")]
    pub output_units: usize,
    /// Hidden layer widths of the backbone; empty means linear.
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default = "default_leaf_iterations")]
    pub leaf_update_iterations: usize,
    /// Mini-batches per leaf update.
    #[serde(default = "default_window_batches")]
    pub window_batches: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Gradient steps; rounded up to whole windows.
    #[serde(default = "default_max_iterations")]
    pub max_iterations: u64,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
    #[serde(default = "default_lr_interval")]
    pub lr_decay_interval: u64,
    #[serde(default = "default_cov_epsilon")]
    pub cov_epsilon: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub leaf_init_permute: bool,
    /// Refit all leaves on the full training set after the last window.
    #[serde(default)]
    pub final_leaf_refit: bool,
    #[serde(default)]
    pub early_stop: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            trees: 5,
            depth: 6,
            output_units: default_output_units(),
            hidden: Vec::new(),
            leaf_update_iterations: default_leaf_iterations(),
            window_batches: default_window_batches(),
            batch_size: default_batch_size(),
            max_iterations: default_max_iterations(),
            learning_rate: default_learning_rate(),
            lr_decay: default_lr_decay(),
            lr_decay_interval: default_lr_interval(),
            cov_epsilon: default_cov_epsilon(),
            seed: 0,
            leaf_init_permute: true,
            final_leaf_refit: false,
            early_stop: false,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| DrfError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("trees", self.trees),
            ("depth", self.depth),
            ("output_units", self.output_units),
            ("leaf_update_iterations", self.leaf_update_iterations),
            ("window_batches", self.window_batches),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(DrfError::Config(format!("{name} must be positive")));
            }
        }
        if self.max_iterations == 0 || self.lr_decay_interval == 0 {
            return Err(DrfError::Config(
                "max_iterations and lr_decay_interval must be positive".into(),
            ));
        }
        if self.hidden.contains(&0) {
            return Err(DrfError::Config("hidden layer widths must be positive".into()));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("lr_decay", self.lr_decay),
            ("cov_epsilon", self.cov_epsilon),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(DrfError::Config(format!("{name} must be positive")));
            }
        }
        TreeTopology::new(self.depth)?;
        Ok(())
    }

    fn validate_for(&self, data: &Dataset) -> Result<()> {
        self.validate()?;
        if data.target_dim() == 0 {
            return Err(DrfError::Config("training data has no target columns".into()));
        }
        if self.batch_size > data.len() {
            return Err(DrfError::Config(format!(
                "batch_size {} exceeds the {} training samples",
                self.batch_size,
                data.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowLeafUpdate {
    pub window: usize,
    /// Per-tree NLL on the window before and after the refit.
    pub nll_before: Vec<f64>,
    pub nll_after: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean mini-batch loss of each window, measured before each step.
    pub window_losses: Vec<f64>,
    pub leaf_updates: Vec<WindowLeafUpdate>,
    pub gradient_steps: u64,
    pub skipped_steps: u64,
    /// Training-set loss (standardized units) after initialization.
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Sample-tree pairs clamped at the density floor during gradient steps.
    pub underflows: usize,
    pub density_floor_hits: usize,
    pub starved_leaves: usize,
    pub floor_activations: usize,
    pub stall_warnings: usize,
    pub early_stopped: bool,
    pub wall_clock_secs: f64,
    /// Metrics on the training set in target units.
    pub train_metrics: MetricsRecord,
}

#[derive(Debug)]
pub enum TrainEvent<'a> {
    GradientStep {
        step: u64,
        window: usize,
        batch: &'a [usize],
        loss: f64,
    },
    LeafUpdate {
        window: usize,
        reports: &'a [LeafUpdateReport],
    },
}

/// Called after every gradient step and every leaf update.
pub trait TrainObserver {
    fn observe(&mut self, event: &TrainEvent<'_>, model: &ForestModel);
}

impl TrainObserver for () {
    fn observe(&mut self, _: &TrainEvent<'_>, _: &ForestModel) {}
}

/// Builds the initial forest on standardized data.
pub fn initialize_forest(data: &Dataset, config: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<ForestModel> {
    let topology = TreeTopology::new(config.depth)?;
    let spec = BackboneSpec::mlp(data.feature_dim(), config.hidden.clone(), config.output_units);
    let backbone = Backbone::new_seeded(spec, rng.random())?;
    let index_fns: Vec<IndexFunction> = (0..config.trees)
        .map(|_| IndexFunction::random(&topology, config.output_units, rng))
        .collect();
    let base = kmeans_init(data.targets(), topology.leaf_count(), rng.random(), config.cov_epsilon)?;
    let tables = assign_leaves_to_trees(&base, config.trees, config.leaf_init_permute, rng.random());
    let trees = index_fns
        .into_iter()
        .zip(tables)
        .map(|(phi, leaves)| Tree::new(topology, phi, leaves))
        .collect::<Result<Vec<_>>>()?;
    ForestModel::new(backbone, trees, data.target_dim())
}

/// Refits every tree's leaves on `(x, y)` with routing computed under the
/// current backbone. Trees are independent and refit in parallel.
pub fn refit_leaves(
    forest: &mut ForestModel,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    iterations: usize,
    cov_epsilon: f64,
) -> Result<Vec<LeafUpdateReport>> {
    let f_out = forest.outputs(x)?;
    forest
        .trees_mut()
        .par_iter_mut()
        .map(|tree| {
            let routings: Vec<RoutingDistribution> = f_out
                .outer_iter()
                .map(|row| tree.route(row.as_slice().expect("standard layout")))
                .collect::<Result<_>>()?;
            update_leaves(tree, &routings, y, iterations, cov_epsilon)
        })
        .collect()
}

pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<(Regressor, TrainReport)> {
    train_with_observer(dataset, config, &mut ())
}

pub fn train_with_observer(
    dataset: &Dataset,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(Regressor, TrainReport)> {
    config.validate_for(dataset)?;
    let start = Instant::now();
    let (data, stats) = dataset.standardize();
    let n = data.len();

    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    let mut forest = initialize_forest(&data, config, &mut master)?;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(master.random());
    let mut schedule = SgdSchedule::new(config.learning_rate, config.lr_decay, config.lr_decay_interval)?;

    let initial_loss = forest.loss_nll(data.features(), data.targets())?.loss;
    let mut report = TrainReport {
        window_losses: Vec::new(),
        leaf_updates: Vec::new(),
        gradient_steps: 0,
        skipped_steps: 0,
        initial_loss,
        final_loss: initial_loss,
        underflows: 0,
        density_floor_hits: 0,
        starved_leaves: 0,
        floor_activations: 0,
        stall_warnings: 0,
        early_stopped: false,
        wall_clock_secs: 0.0,
        train_metrics: MetricsRecord {
            mae: 0.0,
            cs: 0.0,
            cs_level: DEFAULT_CS_LEVEL,
            count: 0,
            within_count: 0,
        },
    };

    let mut window = 0;
    let mut flat_windows = 0;
    let mut best_window_loss = f64::INFINITY;
    while report.gradient_steps < config.max_iterations {
        let mut window_idx = Vec::with_capacity(config.window_batches * config.batch_size);
        let mut loss_sum = 0.0;
        for _ in 0..config.window_batches {
            let idx: Vec<usize> = (0..config.batch_size).map(|_| batch_rng.random_range(0..n)).collect();
            let batch = data.select(&idx)?;
            let (loss, grad) = forest.loss_and_param_grad(batch.features(), batch.targets())?;
            if !loss.loss.is_finite() {
                return Err(DrfError::Training(format!(
                    "non-finite loss at step {}",
                    report.gradient_steps
                )));
            }
            report.underflows += loss.underflows;
            loss_sum += loss.loss;
            if sgd_step(forest.backbone_mut(), &grad, &mut schedule)? == StepOutcome::Skipped {
                report.skipped_steps += 1;
            }
            report.gradient_steps += 1;
            observer.observe(
                &TrainEvent::GradientStep {
                    step: report.gradient_steps,
                    window,
                    batch: &idx,
                    loss: loss.loss,
                },
                &forest,
            );
            window_idx.extend(idx);
        }
        report.window_losses.push(loss_sum / config.window_batches as f64);

        let win = data.select(&window_idx)?;
        let updates = refit_leaves(
            &mut forest,
            win.features(),
            win.targets(),
            config.leaf_update_iterations,
            config.cov_epsilon,
        )?;
        for u in &updates {
            report.starved_leaves += u.starved;
            report.floor_activations += u.floor_activations;
            report.density_floor_hits += u.density_floor_hits;
        }
        report.leaf_updates.push(WindowLeafUpdate {
            window,
            nll_before: updates.iter().map(|u| u.nll_before()).collect(),
            nll_after: updates.iter().map(|u| u.nll_after()).collect(),
        });
        observer.observe(
            &TrainEvent::LeafUpdate {
                window,
                reports: &updates,
            },
            &forest,
        );

        let losses = &report.window_losses;
        if losses.len() > STALL_WINDOWS
            && losses[losses.len() - STALL_WINDOWS - 1..]
                .windows(2)
                .all(|w| w[1] >= w[0])
        {
            report.stall_warnings += 1;
            log::warn!("window loss has not decreased for {STALL_WINDOWS} consecutive windows (window {window})");
        }
        if config.early_stop {
            // Patience against the best window so far; window losses are
            // mini-batch means, so comparing neighbours alone is too noisy.
            let latest = losses[losses.len() - 1];
            if latest < best_window_loss - EARLY_STOP_TOL {
                best_window_loss = latest;
                flat_windows = 0;
            } else {
                flat_windows += 1;
            }
            if flat_windows >= EARLY_STOP_WINDOWS {
                report.early_stopped = true;
                break;
            }
        }
        window += 1;
    }

    if config.final_leaf_refit {
        let updates = refit_leaves(
            &mut forest,
            data.features(),
            data.targets(),
            config.leaf_update_iterations,
            config.cov_epsilon,
        )?;
        for u in &updates {
            report.starved_leaves += u.starved;
            report.floor_activations += u.floor_activations;
        }
    }

    report.final_loss = forest.loss_nll(data.features(), data.targets())?.loss;
    let regressor = Regressor::new(forest, stats.features, stats.targets)?;
    let predictions = regressor.predict(dataset.features())?;
    report.train_metrics = metrics::evaluate(predictions.view(), dataset.targets(), DEFAULT_CS_LEVEL)?;
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((regressor, report))
}

/// MAE and CS of a model on a labeled dataset.
pub fn evaluate(model: &Regressor, dataset: &Dataset, cs_level: f64) -> Result<MetricsRecord> {
    if dataset.target_dim() != model.target_dim() {
        return Err(DrfError::DimensionMismatch {
            what: "target columns",
            expected: model.target_dim(),
            actual: dataset.target_dim(),
        });
    }
    let predictions = model.predict(dataset.features())?;
    metrics::evaluate(predictions.view(), dataset.targets(), cs_level)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_requires_structural_fields() {
        let err = TrainConfig::from_toml_str("trees = 3\n").unwrap_err();
        assert!(err.to_string().contains("depth"));
        let cfg = TrainConfig::from_toml_str("trees = 3\ndepth = 2\n").unwrap();
        assert_eq!(cfg.output_units, 128);
        assert_eq!(cfg.window_batches, 50);
        assert_eq!(cfg.leaf_update_iterations, 20);
        assert_eq!(cfg.max_iterations, 30_000);
        assert!(TrainConfig::from_toml_str("trees = 3\ndepth = 2\nbogus = 1\n").is_err());
        assert!(TrainConfig::from_toml_str("trees = 0\ndepth = 2\n").is_err());
    }

    #[test]
    fn defaults_follow_reference_settings() {
        let c = TrainConfig::default();
        assert_eq!((c.trees, c.depth, c.output_units), (5, 6, 128));
        assert_eq!((c.learning_rate, c.lr_decay, c.lr_decay_interval), (0.05, 0.5, 10_000));
        assert_eq!(c.batch_size, 16);
        assert!(c.validate().is_ok());
    }
}
