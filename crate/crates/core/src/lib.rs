//! Differentiable regression forests.
//!
//! A shared feature function (linear map or small MLP) drives the soft
//! split nodes of several trees whose leaves hold Gaussian densities over the
//! targets. Training alternates SGD steps on the feature function with
//! step-size-free refits of the leaf Gaussians.
//!
//! ```no_run
//! use drf_core::data::{generate_synthetic, SynthSpec, SynthTask};
//! use drf_core::trainer::{train, TrainConfig};
//!
//! let data = generate_synthetic(&SynthSpec { task: SynthTask::Piecewise, samples: 500, noise: 0.3, seed: 1 })?;
//! let config = TrainConfig { trees: 3, depth: 3, output_units: 16, hidden: vec![16], max_iterations: 500, ..Default::default() };
//! let (model, report) = train(&data, &config)?;
//! println!("train MAE {}", report.train_metrics.mae);
//! let y = model.predict_row(&[0.5])?;
//! # Ok::<(), drf_core::error::DrfError>(())
//! ```

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod cli;
pub mod data;
pub mod error;
pub mod forest;
pub mod leaf;
pub mod math;
pub mod metrics;
pub mod model_file;
pub mod regressor;
pub mod trainer;

pub use error::{DrfError, Result};
pub use regressor::Regressor;
