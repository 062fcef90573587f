//! Tabular datasets: CSV ingestion, standardization and seeded synthetic
//! regression tasks.
//!
//! CSV dialect: comma separated, `.` decimal point, UTF-8, mandatory header.
//! Feature columns are named `x0, x1, …` and target columns `y0, y1, …`;
//! other columns are ignored.

use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use rand::distr::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{DrfError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    targets: Array2<f64>,
    feature_names: Vec<String>,
    target_names: Vec<String>,
}

impl Dataset {
    /// `targets` may have zero columns for unlabeled data.
    pub fn new(features: Array2<f64>, targets: Array2<f64>) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(DrfError::EmptyDataset);
        }
        if targets.nrows() != features.nrows() {
            return Err(DrfError::DimensionMismatch {
                what: "target rows",
                expected: features.nrows(),
                actual: targets.nrows(),
            });
        }
        for (name, m) in [("x", &features), ("y", &targets)] {
            if let Some(((row, col), _)) = m.indexed_iter().find(|(_, v)| !v.is_finite()) {
                return Err(DrfError::NonFinite {
                    row: row + 1,
                    column: format!("{name}{col}"),
                });
            }
        }
        Ok(Self {
            feature_names: (0..features.ncols()).map(|i| format!("x{i}")).collect(),
            target_names: (0..targets.ncols()).map(|i| format!("y{i}")).collect(),
            features,
            targets,
        })
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn targets(&self) -> ArrayView2<'_, f64> {
        self.targets.view()
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn target_dim(&self) -> usize {
        self.targets.ncols()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn target_names(&self) -> &[String] {
        &self.target_names
    }

    /// Rows `indices` (repeats allowed) as a new dataset.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Self::new(
            self.features.select(Axis(0), indices),
            self.targets.select(Axis(0), indices),
        )
    }

    /// Standardized copy and the statistics used.
    pub fn standardize(&self) -> (Dataset, DatasetStats) {
        let stats = DatasetStats {
            features: Standardizer::fit(self.features.view()),
            targets: Standardizer::fit(self.targets.view()),
        };
        let ds = Dataset {
            features: stats.features.transform(self.features.view()),
            targets: stats.targets.transform(self.targets.view()),
            feature_names: self.feature_names.clone(),
            target_names: self.target_names.clone(),
        };
        (ds, stats)
    }
}

/// Per-column mean and population standard deviation.
///
/// Constant columns keep a standard deviation of one so they map to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub constant: Vec<bool>,
}

impl Standardizer {
    pub fn fit(data: ArrayView2<f64>) -> Self {
        let n = data.nrows() as f64;
        let mut mean = Vec::with_capacity(data.ncols());
        let mut std = Vec::with_capacity(data.ncols());
        let mut constant = Vec::with_capacity(data.ncols());
        for col in data.columns() {
            let m = col.sum() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            let s = var.sqrt();
            let is_const = !(s > 1e-12 * m.abs().max(1.0));
            mean.push(m);
            std.push(if is_const { 1.0 } else { s });
            constant.push(is_const);
        }
        Self { mean, std, constant }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
            constant: vec![false; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, data: ArrayView2<f64>) -> Array2<f64> {
        let mut out = data.to_owned();
        for (mut col, (m, s)) in out.columns_mut().into_iter().zip(self.mean.iter().zip(&self.std)) {
            col.mapv_inplace(|v| (v - m) / s);
        }
        out
    }

    pub fn transform_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn inverse_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }

    pub fn inverse_transform(&self, data: ArrayView2<f64>) -> Array2<f64> {
        let mut out = data.to_owned();
        for (mut col, (m, s)) in out.columns_mut().into_iter().zip(self.mean.iter().zip(&self.std)) {
            col.mapv_inplace(|v| v * s + m);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub features: Standardizer,
    pub targets: Standardizer,
}

/// Which columns a CSV file must provide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Schema {
    /// Required feature count; inferred from the header when `None`.
    pub feature_dim: Option<usize>,
    /// Required target count; inferred from the header when `None`.
    pub target_dim: Option<usize>,
    /// When false, a file without any `y` columns loads with zero targets.
    pub targets_optional: bool,
}

impl Schema {
    pub fn labeled() -> Self {
        Self::default()
    }

    /// Features of a known width, targets read only if present.
    pub fn features_only(feature_dim: usize) -> Self {
        Self {
            feature_dim: Some(feature_dim),
            target_dim: None,
            targets_optional: true,
        }
    }
}

fn locate(header: &csv::StringRecord, name: &str) -> Option<usize> {
    header.iter().position(|h| h.trim() == name)
}

fn resolve_columns(
    header: &csv::StringRecord,
    prefix: &str,
    fixed: Option<usize>,
    optional: bool,
) -> Result<Vec<usize>> {
    match fixed {
        Some(dim) => (0..dim)
            .map(|i| {
                let name = format!("{prefix}{i}");
                locate(header, &name).ok_or(DrfError::MissingColumn(name))
            })
            .collect(),
        None => {
            let mut cols = Vec::new();
            while let Some(c) = locate(header, &format!("{prefix}{}", cols.len())) {
                cols.push(c);
            }
            if cols.is_empty() && !optional {
                return Err(DrfError::MissingColumn(format!("{prefix}0")));
            }
            Ok(cols)
        }
    }
}

/// A named group of columns `{prefix}0, {prefix}1, …` to read from a CSV file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnGroup {
    pub prefix: String,
    /// Required width; inferred from the header when `None`.
    pub dim: Option<usize>,
    /// Allow the group to be absent when its width is inferred.
    pub optional: bool,
}

/// Reads column groups from CSV; rows in error messages count data rows
/// from 1. Returns one matrix per group.
pub fn read_column_groups<R: Read>(reader: R, groups: &[ColumnGroup]) -> Result<Vec<Array2<f64>>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.is_empty() || header.iter().all(|h| h.trim().is_empty()) {
        return Err(DrfError::EmptyFile("<input>".into()));
    }
    let cols: Vec<Vec<usize>> = groups
        .iter()
        .map(|g| resolve_columns(&header, &g.prefix, g.dim, g.optional))
        .collect::<Result<_>>()?;

    let mut values: Vec<Vec<f64>> = vec![Vec::new(); groups.len()];
    let mut rows = 0;
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let row = r + 1;
        for ((group, cols), out) in groups.iter().zip(&cols).zip(values.iter_mut()) {
            for (i, &c) in cols.iter().enumerate() {
                let raw = record.get(c).unwrap_or("").trim();
                let column = format!("{}{i}", group.prefix);
                let v: f64 = raw.parse().map_err(|_| DrfError::Parse {
                    row,
                    column: column.clone(),
                    value: raw.to_string(),
                })?;
                if !v.is_finite() {
                    return Err(DrfError::NonFinite { row, column });
                }
                out.push(v);
            }
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(DrfError::EmptyDataset);
    }
    Ok(values
        .into_iter()
        .zip(&cols)
        .map(|(v, c)| Array2::from_shape_vec((rows, c.len()), v).expect("row-major fill"))
        .collect())
}

/// Reads a dataset with `x*` feature and `y*` target columns.
pub fn read_csv<R: Read>(reader: R, schema: &Schema) -> Result<Dataset> {
    let groups = [
        ColumnGroup {
            prefix: "x".into(),
            dim: schema.feature_dim,
            optional: false,
        },
        ColumnGroup {
            prefix: "y".into(),
            dim: schema.target_dim,
            optional: schema.targets_optional,
        },
    ];
    let mut mats = read_column_groups(reader, &groups)?;
    let targets = mats.pop().expect("two groups");
    let features = mats.pop().expect("two groups");
    Dataset::new(features, targets)
}

/// Reads a single column group from a file.
pub fn load_columns(path: impl AsRef<Path>, group: ColumnGroup) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let text = read_nonempty(path)?;
    let mut mats = read_column_groups(text.as_bytes(), &[group])?;
    Ok(mats.pop().expect("one group"))
}

fn read_nonempty(path: &Path) -> Result<String> {
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    if text.trim().is_empty() {
        return Err(DrfError::EmptyFile(path.to_path_buf()));
    }
    Ok(text)
}

pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset> {
    let path = path.as_ref();
    let text = read_nonempty(path)?;
    let ds = read_csv(text.as_bytes(), schema).map_err(|e| match e {
        DrfError::EmptyFile(_) => DrfError::EmptyFile(path.to_path_buf()),
        other => other,
    })?;
    log::info!(
        "loaded {}: {} rows, {} features, {} targets",
        path.display(),
        ds.len(),
        ds.feature_dim(),
        ds.target_dim()
    );
    Ok(ds)
}

/// Writes named columns; floats use the shortest representation that
/// parses back to the same value.
pub fn write_matrix_csv<W: Write>(writer: W, columns: &[String], data: ArrayView2<f64>) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(columns)?;
    for row in data.outer_iter() {
        wtr.write_record(row.iter().map(|v| v.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_csv<W: Write>(writer: W, ds: &Dataset) -> Result<()> {
    let mut columns = ds.feature_names.clone();
    columns.extend(ds.target_names.iter().cloned());
    let data = ndarray::concatenate(Axis(1), &[ds.features.view(), ds.targets.view()]).expect("same row count");
    write_matrix_csv(writer, &columns, data.view())
}

pub fn save_csv(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    write_csv(File::create(path)?, ds)
}

/// Seeded synthetic regression tasks with one feature `x0` and one target `y0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthTask {
    /// `x ~ U(-3, 3)`; `y = 3x + 1` for `x < 0`, `y = -2x + 5` otherwise; plus `N(0, σ²)`.
    Piecewise,
    /// Two equally likely regimes: `x ~ N(-2, 0.5²)` with `y = (x + 2)² + 1`,
    /// or `x ~ N(2, 0.5²)` with `y = 6 + 2 sin(3x)`; plus `N(0, σ²)`.
    Bimodal,
    /// `x ~ U(-2, 2)`; `y = sin(3x) + N(0, (σ (0.25 + |x|))²)`.
    HeteroNoise,
}

impl SynthTask {
    pub const NAMES: [&'static str; 3] = ["piecewise", "bimodal", "hetero-noise"];

    pub fn name(&self) -> &'static str {
        match self {
            SynthTask::Piecewise => "piecewise",
            SynthTask::Bimodal => "bimodal",
            SynthTask::HeteroNoise => "hetero-noise",
        }
    }

    /// Noise-free value of the piecewise task.
    pub fn piecewise(x: f64) -> f64 {
        if x < 0.0 {
            3.0 * x + 1.0
        } else {
            -2.0 * x + 5.0
        }
    }
}

impl fmt::Display for SynthTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SynthTask {
    type Err = DrfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "piecewise" => Ok(SynthTask::Piecewise),
            "bimodal" => Ok(SynthTask::Bimodal),
            "hetero-noise" => Ok(SynthTask::HeteroNoise),
            _ => Err(DrfError::UnknownTask {
                name: s.to_string(),
                valid: Self::NAMES.join(", "),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub task: SynthTask,
    pub samples: usize,
    pub noise: f64,
    pub seed: u64,
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    if spec.samples == 0 {
        return Err(DrfError::EmptyDataset);
    }
    if !(spec.noise >= 0.0) || !spec.noise.is_finite() {
        return Err(DrfError::Config(format!(
            "noise must be a finite non-negative number, got {}",
            spec.noise
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut xs = Vec::with_capacity(spec.samples);
    let mut ys = Vec::with_capacity(spec.samples);
    for _ in 0..spec.samples {
        let (x, y) = match spec.task {
            SynthTask::Piecewise => {
                let x = Uniform::new(-3.0, 3.0).expect("valid range").sample(&mut rng);
                let z: f64 = rng.sample(StandardNormal);
                (x, SynthTask::piecewise(x) + spec.noise * z)
            }
            SynthTask::Bimodal => {
                let upper = rng.random_bool(0.5);
                let u: f64 = rng.sample(StandardNormal);
                let z: f64 = rng.sample(StandardNormal);
                let (x, y) = if upper {
                    let x = 2.0 + 0.5 * u;
                    (x, 6.0 + 2.0 * (3.0 * x).sin())
                } else {
                    let x = -2.0 + 0.5 * u;
                    (x, (x + 2.0) * (x + 2.0) + 1.0)
                };
                (x, y + spec.noise * z)
            }
            SynthTask::HeteroNoise => {
                let x: f64 = Uniform::new(-2.0, 2.0).expect("valid range").sample(&mut rng);
                let z: f64 = rng.sample(StandardNormal);
                (x, (3.0 * x).sin() + spec.noise * (0.25 + x.abs()) * z)
            }
        };
        xs.push(x);
        ys.push(y);
    }
    Dataset::new(
        Array2::from_shape_vec((spec.samples, 1), xs).expect("column"),
        Array2::from_shape_vec((spec.samples, 1), ys).expect("column"),
    )
}
