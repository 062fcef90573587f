use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{DrfError, Result};
use crate::math::LN_2PI;

/// Default eigenvalue floor for leaf covariances, in standardized target units.
pub const DEFAULT_COV_EPSILON: f64 = 1e-4;

/// Gaussian density held by one leaf.
///
/// The covariance is stored row-major together with its inverse and the log
/// normalizer `-(d ln 2π + ln det Σ) / 2`, so evaluation is a quadratic form.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafGaussian {
    mean: Vec<f64>,
    cov: Vec<f64>,
    precision: Vec<f64>,
    log_norm: f64,
    floored: bool,
}

impl LeafGaussian {
    /// Builds a leaf from a mean and a row-major covariance.
    ///
    /// Eigenvalues below `cov_epsilon` are raised to it and the covariance is
    /// rebuilt from the clamped spectrum; [`floored`](Self::floored) reports
    /// whether that happened. With `cov_epsilon <= 0` no clamping is done and
    /// a covariance that is not positive definite is rejected.
    pub fn new(mean: Vec<f64>, cov: Vec<f64>, cov_epsilon: f64) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(DrfError::Covariance("zero-dimensional leaf".into()));
        }
        if cov.len() != d * d {
            return Err(DrfError::DimensionMismatch {
                what: "covariance entries",
                expected: d * d,
                actual: cov.len(),
            });
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(DrfError::Covariance("non-finite mean or covariance".into()));
        }

        if d == 1 {
            let mut var = cov[0];
            let mut floored = false;
            if var < cov_epsilon {
                var = cov_epsilon;
                floored = true;
            }
            if var <= 0.0 {
                return Err(DrfError::Covariance(format!("variance {var} is not positive")));
            }
            return Ok(Self {
                mean,
                cov: vec![var],
                precision: vec![1.0 / var],
                log_norm: -0.5 * (LN_2PI + var.ln()),
                floored,
            });
        }

        let mut cov = cov;
        symmetrize(&mut cov, d);
        let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, &cov));
        let min_eig = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        let floored = min_eig < cov_epsilon;
        let eigenvalues: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(cov_epsilon)).collect();
        if eigenvalues.iter().any(|&l| l <= 0.0) {
            return Err(DrfError::Covariance(format!(
                "covariance is not positive definite (min eigenvalue {min_eig})"
            )));
        }
        if floored {
            cov = from_spectrum(&eig.eigenvectors, &eigenvalues, |l| l);
        }
        let precision = from_spectrum(&eig.eigenvectors, &eigenvalues, |l| 1.0 / l);
        let log_det: f64 = eigenvalues.iter().map(|l| l.ln()).sum();
        Ok(Self {
            mean,
            cov,
            precision,
            log_norm: -0.5 * (d as f64 * LN_2PI + log_det),
            floored,
        })
    }

    /// Isotropic leaf `N(mean, var·I)`.
    pub fn isotropic(mean: Vec<f64>, var: f64) -> Result<Self> {
        let d = mean.len();
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            cov[i * d + i] = var;
        }
        Self::new(mean, cov, 0.0)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Row-major covariance.
    pub fn cov(&self) -> &[f64] {
        &self.cov
    }

    pub fn precision(&self) -> &[f64] {
        &self.precision
    }

    pub fn log_normalizer(&self) -> f64 {
        self.log_norm
    }

    /// Whether the eigenvalue floor changed the covariance at construction.
    pub fn floored(&self) -> bool {
        self.floored
    }

    /// `ln π(y)`.
    pub fn log_density(&self, y: &[f64]) -> Result<f64> {
        if y.len() != self.dim() {
            return Err(DrfError::DimensionMismatch {
                what: "target length",
                expected: self.dim(),
                actual: y.len(),
            });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(DrfError::InvalidTarget(format!("{y:?}")));
        }
        Ok(self.log_density_unchecked(y))
    }

    pub fn density(&self, y: &[f64]) -> Result<f64> {
        self.log_density(y).map(f64::exp)
    }

    #[inline]
    pub(crate) fn log_density_unchecked(&self, y: &[f64]) -> f64 {
        let d = self.mean.len();
        if d == 1 {
            let diff = y[0] - self.mean[0];
            return self.log_norm - 0.5 * diff * diff * self.precision[0];
        }
        let mut quad = 0.0;
        for i in 0..d {
            let di = y[i] - self.mean[i];
            let row = &self.precision[i * d..(i + 1) * d];
            let mut acc = 0.0;
            for j in 0..d {
                acc += row[j] * (y[j] - self.mean[j]);
            }
            quad += di * acc;
        }
        self.log_norm - 0.5 * quad
    }

    /// Smallest eigenvalue of the stored covariance.
    pub fn min_eigenvalue(&self) -> f64 {
        let d = self.dim();
        if d == 1 {
            return self.cov[0];
        }
        SymmetricEigen::new(DMatrix::from_row_slice(d, d, &self.cov))
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

fn symmetrize(m: &mut [f64], d: usize) {
    for i in 0..d {
        for j in (i + 1)..d {
            let avg = 0.5 * (m[i * d + j] + m[j * d + i]);
            m[i * d + j] = avg;
            m[j * d + i] = avg;
        }
    }
}

fn from_spectrum(vectors: &DMatrix<f64>, values: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
    let d = values.len();
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in i..d {
            let mut acc = 0.0;
            for (k, &l) in values.iter().enumerate() {
                acc += vectors[(i, k)] * f(l) * vectors[(j, k)];
            }
            out[i * d + j] = acc;
            out[j * d + i] = acc;
        }
    }
    out
}
