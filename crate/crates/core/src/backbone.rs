//! Feature function `f(x; Θ)`: a linear map or a ReLU multilayer perceptron
//! with an identity output layer, stored as one flat parameter vector.
//!
//! Layer `l` occupies a contiguous block of Θ: its weight matrix
//! (`out × in`, row-major) followed by its bias vector.

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DrfError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub input_dim: usize,
    /// Hidden layer widths; empty for a linear backbone.
    pub hidden: Vec<usize>,
    pub output_dim: usize,
}

impl BackboneSpec {
    pub fn linear(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: Vec::new(),
            output_dim,
        }
    }

    pub fn mlp(input_dim: usize, hidden: Vec<usize>, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden,
            output_dim,
        }
    }

    /// `(fan_in, fan_out)` of every layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(self.input_dim);
        dims.extend(&self.hidden);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(DrfError::Config(format!(
                "backbone layer widths must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    spec: BackboneSpec,
    params: Vec<f64>,
    generation: u64,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    /// Input to each layer; `inputs[0]` is `x`.
    inputs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneGrad {
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

impl Backbone {
    /// Weights uniform in `±1/√fan_in`, biases zero.
    pub fn new_seeded(spec: BackboneSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(spec.param_count());
        for (fan_in, fan_out) in spec.layer_shapes() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            params.extend((0..fan_in * fan_out).map(|_| dist.sample(&mut rng)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Self {
            spec,
            params,
            generation: 0,
        })
    }

    pub fn from_params(spec: BackboneSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.param_count() {
            return Err(DrfError::DimensionMismatch {
                what: "backbone parameters",
                expected: spec.param_count(),
                actual: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(DrfError::Config("non-finite backbone parameter".into()));
        }
        Ok(Self {
            spec,
            params,
            generation: 0,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Overwrites Θ; invalidates outstanding forward caches.
    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(DrfError::DimensionMismatch {
                what: "backbone parameters",
                expected: self.params.len(),
                actual: params.len(),
            });
        }
        self.params = params;
        self.generation += 1;
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        if x.len() != self.spec.input_dim {
            return Err(DrfError::DimensionMismatch {
                what: "input features",
                expected: self.spec.input_dim,
                actual: x.len(),
            });
        }
        let shapes = self.spec.layer_shapes();
        let last = shapes.len() - 1;
        let mut inputs = Vec::with_capacity(shapes.len());
        let mut current = x.to_vec();
        let mut offset = 0;
        for (l, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            let w = &self.params[offset..offset + fan_in * fan_out];
            let b = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            let mut next: Vec<f64> = (0..fan_out)
                .map(|o| {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    row.iter().zip(&current).fold(b[o], |acc, (wi, xi)| acc + wi * xi)
                })
                .collect();
            if l != last {
                for v in &mut next {
                    *v = v.max(0.0);
                }
            }
            inputs.push(std::mem::replace(&mut current, next));
        }
        Ok((
            current,
            ForwardCache {
                generation: self.generation,
                inputs,
            },
        ))
    }

    /// Output only, no cache.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward(x).map(|(out, _)| out)
    }

    pub fn backward(&self, cache: &ForwardCache, dl_df: &[f64]) -> Result<BackboneGrad> {
        let mut params = vec![0.0; self.params.len()];
        let input = self.backward_accumulate(cache, dl_df, &mut params)?;
        Ok(BackboneGrad { params, input })
    }

    /// Adds `∂L/∂Θ` into `param_grad` and returns `∂L/∂x`.
    pub fn backward_accumulate(&self, cache: &ForwardCache, dl_df: &[f64], param_grad: &mut [f64]) -> Result<Vec<f64>> {
        if cache.generation != self.generation {
            return Err(DrfError::StaleCache {
                cached: cache.generation,
                current: self.generation,
            });
        }
        if dl_df.len() != self.spec.output_dim {
            return Err(DrfError::DimensionMismatch {
                what: "output gradient",
                expected: self.spec.output_dim,
                actual: dl_df.len(),
            });
        }
        if param_grad.len() != self.params.len() {
            return Err(DrfError::DimensionMismatch {
                what: "parameter gradient",
                expected: self.params.len(),
                actual: param_grad.len(),
            });
        }
        let shapes = self.spec.layer_shapes();
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut offset = 0;
        for &(i, o) in &shapes {
            offsets.push(offset);
            offset += i * o + o;
        }

        let mut delta = dl_df.to_vec();
        for l in (0..shapes.len()).rev() {
            let (fan_in, fan_out) = shapes[l];
            let input = &cache.inputs[l];
            let w_off = offsets[l];
            let b_off = w_off + fan_in * fan_out;
            for o in 0..fan_out {
                let d = delta[o];
                param_grad[b_off + o] += d;
                let g_row = &mut param_grad[w_off + o * fan_in..w_off + (o + 1) * fan_in];
                for (g, xi) in g_row.iter_mut().zip(input) {
                    *g += d * xi;
                }
            }
            let w = &self.params[w_off..b_off];
            let mut prev = vec![0.0; fan_in];
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (p, wi) in prev.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                    *p += d * wi;
                }
            }
            if l > 0 {
                // ReLU mask: the layer input is the rectified output of layer l-1.
                for (p, a) in prev.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            delta = prev;
        }
        Ok(delta)
    }
}

/// Step-decay learning rate: `lr0 · decay^⌊t / interval⌋`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdSchedule {
    pub initial_lr: f64,
    pub decay: f64,
    pub interval: u64,
    pub iteration: u64,
}

impl SgdSchedule {
    pub fn new(initial_lr: f64, decay: f64, interval: u64) -> Result<Self> {
        if !(initial_lr > 0.0) || !(decay > 0.0) || interval == 0 {
            return Err(DrfError::Config(format!(
                "invalid learning-rate schedule: lr {initial_lr}, decay {decay}, interval {interval}"
            )));
        }
        Ok(Self {
            initial_lr,
            decay,
            interval,
            iteration: 0,
        })
    }

    pub fn lr_at(&self, iteration: u64) -> f64 {
        self.initial_lr * self.decay.powi((iteration / self.interval) as i32)
    }

    pub fn current_lr(&self) -> f64 {
        self.lr_at(self.iteration)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    Applied {
        lr: f64,
    },
    /// Gradient had a non-finite entry; parameters untouched.
    Skipped,
}

/// `Θ ← Θ − lr(t)·g`, then advances the schedule.
pub fn sgd_step(backbone: &mut Backbone, grads: &[f64], schedule: &mut SgdSchedule) -> Result<StepOutcome> {
    if grads.len() != backbone.params.len() {
        return Err(DrfError::DimensionMismatch {
            what: "parameter gradient",
            expected: backbone.params.len(),
            actual: grads.len(),
        });
    }
    let lr = schedule.current_lr();
    schedule.iteration += 1;
    if grads.iter().any(|g| !g.is_finite()) {
        log::warn!("skipping SGD step with non-finite gradient");
        return Ok(StepOutcome::Skipped);
    }
    for (p, g) in backbone.params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    backbone.generation += 1;
    Ok(StepOutcome::Applied { lr })
}
