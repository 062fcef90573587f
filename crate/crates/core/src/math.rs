//! Small numerically stable helpers shared by the forest and leaf code.

/// Split activations are clipped to this magnitude before the sigmoid.
pub const ACTIVATION_CLIP: f64 = 36.0;

/// Per-tree log-density floor used by the loss.
pub const LOG_DENSITY_FLOOR: f64 = -300.0;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[inline]
pub fn clip_activation(z: f64) -> f64 {
    z.clamp(-ACTIVATION_CLIP, ACTIVATION_CLIP)
}

/// Logistic sigmoid of a clipped activation.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    let z = clip_activation(z);
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// `ln sigmoid(z)` of a clipped activation.
#[inline]
pub fn log_sigmoid(z: f64) -> f64 {
    -softplus(-clip_activation(z))
}

/// `ln Σ exp(v)`; returns `-inf` for an empty slice or all `-inf` entries.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_stays_open_at_clip() {
        let hi = sigmoid(1e6);
        let lo = sigmoid(-1e6);
        assert!(hi < 1.0 && hi > 0.5);
        assert!(lo > 0.0 && lo < 0.5);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn log_sigmoid_matches_direct() {
        for z in [-5.0, -0.3, 0.0, 0.7, 4.0] {
            let direct = (1.0 / (1.0 + f64::exp(-z))).ln();
            assert!((log_sigmoid(z) - direct).abs() < 1e-14);
        }
    }

    #[test]
    fn lse_handles_large_magnitudes() {
        let v = [-1000.0, -1000.0];
        assert!((log_sum_exp(&v) - (-1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
    }
}
