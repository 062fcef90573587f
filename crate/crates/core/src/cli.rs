//! `drf` command line: `train`, `predict`, `eval` and `synth`.
//!
//! Every successful command prints one summary line starting with `RESULT `.
//! Exit codes: 1 for configuration or usage errors, 2 for data errors, 3 for
//! training or prediction failures.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::data::{self, ColumnGroup, Schema, SynthSpec, SynthTask};
use crate::error::DrfError;
use crate::metrics::{self, DEFAULT_CS_LEVEL};
use crate::model_file;
use crate::trainer::{self, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "drf", version, about = "Differentiable regression forests")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a forest from a TOML config and a CSV dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Report path; defaults to `<out>.report.json`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Predict targets for every row of a CSV file.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a prediction file against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long = "cs-level", default_value_t = DEFAULT_CS_LEVEL)]
        cs_level: f64,
        /// Optional JSON metrics output.
        #[arg(long = "metrics-out")]
        metrics_out: Option<PathBuf>,
    },
    /// Write a synthetic dataset.
    Synth {
        #[arg(long)]
        task: String,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        noise: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
pub struct CliFailure {
    pub code: i32,
    pub message: String,
}

impl CliFailure {
    fn config(e: impl std::fmt::Display) -> Self {
        Self {
            code: 1,
            message: e.to_string(),
        }
    }

    fn data(e: impl std::fmt::Display) -> Self {
        Self {
            code: 2,
            message: e.to_string(),
        }
    }

    fn failure(e: impl std::fmt::Display) -> Self {
        Self {
            code: 3,
            message: e.to_string(),
        }
    }
}

type CliResult = std::result::Result<String, CliFailure>;

/// Runs a parsed command and returns its `RESULT` line.
pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Train {
            config,
            data,
            out,
            seed,
            report,
        } => cmd_train(&config, &data, &out, seed, report.as_deref()),
        Command::Predict { model, data, out } => cmd_predict(&model, &data, &out),
        Command::Eval {
            pred,
            truth,
            cs_level,
            metrics_out,
        } => cmd_eval(&pred, &truth, cs_level, metrics_out.as_deref()),
        Command::Synth {
            task,
            n,
            noise,
            seed,
            out,
        } => cmd_synth(&task, n, noise, seed, &out),
    }
}

fn default_report_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".report.json");
    PathBuf::from(name)
}

pub fn cmd_train(config: &Path, data: &Path, out: &Path, seed: Option<u64>, report: Option<&Path>) -> CliResult {
    let text = fs::read_to_string(config).map_err(|e| CliFailure::config(format!("{}: {e}", config.display())))?;
    let mut cfg = TrainConfig::from_toml_str(&text).map_err(CliFailure::config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let dataset = data::load_csv(data, &Schema::labeled()).map_err(CliFailure::data)?;
    let (model, train_report) = trainer::train(&dataset, &cfg).map_err(|e| match e {
        DrfError::Config(_) => CliFailure::config(e),
        DrfError::InsufficientSamples { .. } => CliFailure::data(e),
        other => CliFailure::failure(other),
    })?;
    model_file::save_model(&model, out).map_err(CliFailure::failure)?;
    let report_path = report
        .map(Path::to_path_buf)
        .unwrap_or_else(|| default_report_path(out));
    let json = serde_json::to_string_pretty(&train_report).map_err(CliFailure::failure)?;
    fs::write(&report_path, json + "\n").map_err(CliFailure::failure)?;
    Ok(format!(
        "RESULT train MAE {:.4}, CS {:.4}, steps {}, windows {}, model {}",
        train_report.train_metrics.mae,
        train_report.train_metrics.cs,
        train_report.gradient_steps,
        train_report.window_losses.len(),
        out.display()
    ))
}

pub fn cmd_predict(model: &Path, data: &Path, out: &Path) -> CliResult {
    let model = model_file::load_model(model).map_err(CliFailure::config)?;
    let dataset = data::load_csv(data, &Schema::features_only(model.input_dim())).map_err(CliFailure::data)?;
    let predictions = model.predict(dataset.features()).map_err(CliFailure::failure)?;
    let columns: Vec<String> = (0..model.target_dim()).map(|i| format!("y_pred{i}")).collect();
    let file = fs::File::create(out).map_err(CliFailure::data)?;
    data::write_matrix_csv(file, &columns, predictions.view()).map_err(CliFailure::data)?;
    Ok(format!(
        "RESULT predict rows {}, out {}",
        predictions.nrows(),
        out.display()
    ))
}

pub fn cmd_eval(pred: &Path, truth: &Path, cs_level: f64, metrics_out: Option<&Path>) -> CliResult {
    if !(cs_level >= 0.0) {
        return Err(CliFailure::config(format!(
            "--cs-level must be non-negative, got {cs_level}"
        )));
    }
    let group = |prefix: &str| ColumnGroup {
        prefix: prefix.into(),
        dim: None,
        optional: false,
    };
    let p = data::load_columns(pred, group("y_pred")).map_err(CliFailure::data)?;
    let t = data::load_columns(truth, group("y")).map_err(CliFailure::data)?;
    let record = metrics::evaluate(p.view(), t.view(), cs_level).map_err(CliFailure::data)?;
    if let Some(path) = metrics_out {
        let json = serde_json::to_string_pretty(&record).map_err(CliFailure::failure)?;
        fs::write(path, json + "\n").map_err(CliFailure::data)?;
    }
    Ok(format!("RESULT MAE {:.4}, CS {:.4}", record.mae, record.cs))
}

pub fn cmd_synth(task: &str, n: usize, noise: f64, seed: u64, out: &Path) -> CliResult {
    let task: SynthTask = task.parse().map_err(CliFailure::config)?;
    let spec = SynthSpec {
        task,
        samples: n,
        noise,
        seed,
    };
    let ds = data::generate_synthetic(&spec).map_err(CliFailure::config)?;
    data::save_csv(out, &ds).map_err(CliFailure::data)?;
    Ok(format!(
        "RESULT synth task {task}, rows {}, out {}",
        ds.len(),
        out.display()
    ))
}
