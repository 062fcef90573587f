//! Python bindings: the `drforest` extension module.
//!
//! Matrices cross the boundary as lists of rows (any sequence of float
//! sequences, NumPy arrays included).

use drf_core::data::{self as data_io, Dataset, SynthSpec, SynthTask};
use drf_core::error::DrfError;
use drf_core::forest::{route_activations, LeafGaussian, SplitActivations, TreeTopology};
use drf_core::metrics;
use drf_core::model_file;
use drf_core::regressor::Regressor;
use drf_core::trainer::{self, TrainConfig};
use ndarray::Array2;
use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(
    drforest,
    DrfException,
    PyValueError,
    "Raised for any error reported by the forest library."
);

type Rows = Vec<Vec<f64>>;

fn to_py(err: DrfError) -> PyErr {
    DrfException::new_err(err.to_string())
}

fn matrix(rows: Vec<Vec<f64>>, what: &str) -> PyResult<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if let Some(i) = rows.iter().position(|r| r.len() != cols) {
        return Err(DrfException::new_err(format!(
            "{what}: row {i} has {} values, expected {cols}",
            rows[i].len()
        )));
    }
    let n = rows.len();
    Array2::from_shape_vec((n, cols), rows.into_iter().flatten().collect())
        .map_err(|e| DrfException::new_err(format!("{what}: {e}")))
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

fn json_to_py(py: Python<'_>, text: &str) -> PyResult<Py<PyAny>> {
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// A trained forest together with its input and target standardization.
#[pyclass(module = "drforest")]
pub struct Forest {
    inner: Regressor,
    report: Option<String>,
}

#[pymethods]
impl Forest {
    /// Trains a forest on `x` (N × d_x) and `y` (N × d_y).
    #[staticmethod]
    #[allow(clippy::too_many_arguments)]
    #[pyo3(signature = (
        x, y, *, trees=5, depth=6, output_units=128, hidden=Vec::new(), leaf_update_iterations=20,
        window_batches=50, batch_size=16, max_iterations=30000, learning_rate=0.05, lr_decay=0.5,
        lr_decay_interval=10000, cov_epsilon=1e-4, seed=0, leaf_init_permute=true,
        final_leaf_refit=false, early_stop=false
    ))]
    fn train(
        py: Python<'_>,
        x: Vec<Vec<f64>>,
        y: Vec<Vec<f64>>,
        trees: usize,
        depth: usize,
        output_units: usize,
        hidden: Vec<usize>,
        leaf_update_iterations: usize,
        window_batches: usize,
        batch_size: usize,
        max_iterations: u64,
        learning_rate: f64,
        lr_decay: f64,
        lr_decay_interval: u64,
        cov_epsilon: f64,
        seed: u64,
        leaf_init_permute: bool,
        final_leaf_refit: bool,
        early_stop: bool,
    ) -> PyResult<Self> {
        let config = TrainConfig {
            trees,
            depth,
            output_units,
            hidden,
            leaf_update_iterations,
            window_batches,
            batch_size,
            max_iterations,
            learning_rate,
            lr_decay,
            lr_decay_interval,
            cov_epsilon,
            seed,
            leaf_init_permute,
            final_leaf_refit,
            early_stop,
        };
        let dataset = Dataset::new(matrix(x, "x")?, matrix(y, "y")?).map_err(to_py)?;
        let (inner, report) = py.detach(|| trainer::train(&dataset, &config)).map_err(to_py)?;
        let report = serde_json::to_string(&report).map_err(|e| DrfException::new_err(e.to_string()))?;
        Ok(Self {
            inner,
            report: Some(report),
        })
    }

    /// Training report as a dict, or `None` for a loaded model.
    #[getter]
    fn report(&self, py: Python<'_>) -> PyResult<Option<Py<PyAny>>> {
        self.report.as_deref().map(|r| json_to_py(py, r)).transpose()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    #[getter]
    fn target_dim(&self) -> usize {
        self.inner.target_dim()
    }

    #[getter]
    fn trees(&self) -> usize {
        self.inner.forest().trees().len()
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.forest().trees()[0].topology().depth()
    }

    /// Predictions for every row of `x`, in target units.
    fn predict(&self, py: Python<'_>, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = matrix(x, "x")?;
        let out = py.detach(|| self.inner.predict(x.view())).map_err(to_py)?;
        Ok(rows(&out))
    }

    fn predict_row(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.predict_row(&x).map_err(to_py)
    }

    /// MAE and CS of the model on labeled data.
    #[pyo3(signature = (x, y, cs_level=metrics::DEFAULT_CS_LEVEL))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        x: Vec<Vec<f64>>,
        y: Vec<Vec<f64>>,
        cs_level: f64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let dataset = Dataset::new(matrix(x, "x")?, matrix(y, "y")?).map_err(to_py)?;
        let record = trainer::evaluate(&self.inner, &dataset, cs_level).map_err(to_py)?;
        metrics_dict(py, &record)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        model_file::save_model(&self.inner, path).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner = model_file::load_model(path).map_err(to_py)?;
        Ok(Self { inner, report: None })
    }

    fn to_json(&self) -> PyResult<String> {
        model_file::to_json_string(&self.inner).map_err(to_py)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = model_file::from_json_str(text).map_err(to_py)?;
        Ok(Self { inner, report: None })
    }

    fn __repr__(&self) -> String {
        format!(
            "Forest(trees={}, depth={}, input_dim={}, target_dim={})",
            self.trees(),
            self.depth(),
            self.input_dim(),
            self.target_dim()
        )
    }
}

fn metrics_dict<'py>(py: Python<'py>, record: &metrics::MetricsRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("mae", record.mae)?;
    d.set_item("cs", record.cs)?;
    d.set_item("cs_level", record.cs_level)?;
    d.set_item("count", record.count)?;
    d.set_item("within_count", record.within_count)?;
    Ok(d)
}

/// Synthetic dataset as `(x, y)` lists of rows.
#[pyfunction]
#[pyo3(signature = (task, n, noise, seed=0))]
fn generate_synthetic(task: &str, n: usize, noise: f64, seed: u64) -> PyResult<(Rows, Rows)> {
    let task: SynthTask = task.parse().map_err(to_py)?;
    let ds = data_io::generate_synthetic(&SynthSpec {
        task,
        samples: n,
        noise,
        seed,
    })
    .map_err(to_py)?;
    Ok((rows(&ds.features().to_owned()), rows(&ds.targets().to_owned())))
}

#[pyfunction]
fn mae(predictions: Vec<Vec<f64>>, truths: Vec<Vec<f64>>) -> PyResult<f64> {
    let (p, t) = (matrix(predictions, "predictions")?, matrix(truths, "truths")?);
    metrics::mae(p.view(), t.view()).map_err(to_py)
}

/// Percentage of samples whose absolute error is at most `level`.
#[pyfunction]
#[pyo3(signature = (predictions, truths, level=metrics::DEFAULT_CS_LEVEL))]
fn cumulative_score(predictions: Vec<Vec<f64>>, truths: Vec<Vec<f64>>, level: f64) -> PyResult<f64> {
    let (p, t) = (matrix(predictions, "predictions")?, matrix(truths, "truths")?);
    metrics::cumulative_score(p.view(), t.view(), level).map_err(to_py)
}

/// Leaf probabilities of a complete tree given the left-branch probability
/// of every split node in heap order (length `2^depth - 1`).
#[pyfunction]
fn route(split_probabilities: Vec<f64>) -> PyResult<Vec<f64>> {
    let splits = split_probabilities.len();
    if splits == 0 || !(splits + 1).is_power_of_two() {
        return Err(DrfException::new_err(format!(
            "expected 2^depth - 1 split probabilities, got {splits}"
        )));
    }
    let topology = TreeTopology::new((splits + 1).trailing_zeros() as usize).map_err(to_py)?;
    let act = SplitActivations::from_probabilities(&split_probabilities).map_err(to_py)?;
    Ok(route_activations(&topology, &act)
        .map_err(to_py)?
        .probabilities()
        .to_vec())
}

/// Log-density of a Gaussian with the given mean and covariance (rows).
#[pyfunction]
fn gaussian_log_density(mean: Vec<f64>, cov: Vec<Vec<f64>>, y: Vec<f64>) -> PyResult<f64> {
    let cov = matrix(cov, "cov")?;
    let leaf = LeafGaussian::new(mean, cov.iter().copied().collect(), 0.0).map_err(to_py)?;
    leaf.log_density(&y).map_err(to_py)
}

#[pymodule]
fn drforest(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Forest>()?;
    m.add("DrfException", m.py().get_type::<DrfException>())?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(mae, m)?)?;
    m.add_function(wrap_pyfunction!(cumulative_score, m)?)?;
    m.add_function(wrap_pyfunction!(route, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_log_density, m)?)?;
    Ok(())
}
