//! Quantizers and their straight-through backward rules.
//!
//! Two value grids live here: a fixed-point grid for nonpositive log-domain
//! parameters (classifier side) and a symmetric [-1, 1] grid for network
//! weights (DoReFa-style). Both are pure functions; the stochastic sign takes
//! its uniform draw as an argument so every bit of randomness is injectable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed-point configuration for log-domain parameters: `bi` integer bits and
/// `bf` fractional bits. `bf` may be negative, which coarsens the grid to
/// multiples of `2^|bf|`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BnQuantConfig {
    pub bi: u32,
    pub bf: i32,
}

impl BnQuantConfig {
    /// Validates `bi >= 1`, a positive total bit count, and a positive range
    /// bound `U`.
    pub fn new(bi: u32, bf: i32) -> Result<Self> {
        if bi < 1 {
            return Err(Error::config("integer bits must be >= 1"));
        }
        if bi as i64 + (bf as i64) < 1 {
            return Err(Error::config(format!(
                "total bits bi + bf = {} must be >= 1",
                bi as i64 + bf as i64
            )));
        }
        let cfg = BnQuantConfig { bi, bf };
        if cfg.max_magnitude() <= 0.0 {
            return Err(Error::config("quantizer range bound must be positive"));
        }
        Ok(cfg)
    }

    /// Total bits per parameter, `bi + bf`.
    pub fn total_bits(&self) -> u32 {
        (self.bi as i64 + self.bf as i64) as u32
    }

    /// Grid spacing `2^-bf`.
    pub fn step(&self) -> f64 {
        (-self.bf as f64).exp2()
    }

    /// Largest representable magnitude `U = 2^bi - 2^-bf`; outputs lie in
    /// `[-U, 0]`.
    pub fn max_magnitude(&self) -> f64 {
        (self.bi as f64).exp2() - self.step()
    }
}

/// Uniform weight-grid configuration: `b` total bits in `1..=32`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DnnQuantConfig {
    pub b: u32,
}

impl DnnQuantConfig {
    pub fn new(b: u32) -> Result<Self> {
        if b < 1 || b > 32 {
            return Err(Error::config(format!("weight bits must be in 1..=32, got {b}")));
        }
        Ok(DnnQuantConfig { b })
    }

    /// Number of grid intervals, `2^b - 1`.
    pub fn levels(&self) -> f64 {
        (self.b as f64).exp2() - 1.0
    }
}

/// Quantizes a nonpositive log-domain value onto the fixed-point grid:
/// `clip(round(x * 2^bf) * 2^-bf, -U, 0)`.
///
/// Rounding is half-away-from-zero. Slightly positive inputs (which occur for
/// unnormalized intermediates) clip to 0 rather than erroring.
pub fn quantize_bn(theta: f64, cfg: BnQuantConfig) -> f64 {
    let scale = (cfg.bf as f64).exp2();
    let q = (theta * scale).round() / scale;
    q.clamp(-cfg.max_magnitude(), 0.0)
}

/// Identity straight-through backward for `quantize_bn`.
pub fn quantize_bn_backward(upstream_grad: f64) -> f64 {
    upstream_grad
}

/// Quantizes a weight onto the symmetric `b`-bit grid
/// `{-1 + 2k/(2^b - 1) : k = 0..2^b - 1}` by clipping to `[-1, 1]`, mapping to
/// `[0, 1]`, and rounding to `2^b - 1` intervals.
pub fn quantize_dnn(w: f64, cfg: DnnQuantConfig) -> f64 {
    let n = cfg.levels();
    let v = (w.clamp(-1.0, 1.0) + 1.0) / 2.0;
    let k = (n * v).round();
    (2.0 * k - n) / n
}

/// Identity straight-through backward for `quantize_dnn`.
pub fn quantize_dnn_backward(upstream_grad: f64) -> f64 {
    upstream_grad
}

/// Binary activation: +1 with probability `(1 + clip(a, -1, 1)) / 2`, else -1.
/// `u` is the uniform draw in `[0, 1]` deciding the outcome.
pub fn stochastic_sign(a: f64, u: f64) -> f64 {
    let p = (1.0 + a.clamp(-1.0, 1.0)) / 2.0;
    if u <= p {
        1.0
    } else {
        -1.0
    }
}

/// Deterministic binary activation used at inference: sign with `sign(0) = 1`.
pub fn hard_sign(a: f64) -> f64 {
    if a >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Straight-through backward for the sign activation: the hyperbolic-tangent
/// derivative `1 - tanh(a)^2` scales the upstream gradient.
pub fn sign_backward(a: f64, upstream_grad: f64) -> f64 {
    let t = a.tanh();
    upstream_grad * (1.0 - t * t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn bn_examples() {
        let c11 = BnQuantConfig::new(1, 1).unwrap();
        assert_eq!(c11.max_magnitude(), 1.5);
        assert_eq!(quantize_bn(0.0, c11), 0.0);
        assert_eq!(quantize_bn(-0.7, c11), -0.5);

        let c20 = BnQuantConfig::new(2, 0).unwrap();
        assert_eq!(c20.max_magnitude(), 3.0);
        assert_eq!(quantize_bn(-5.2, c20), -3.0);

        // Positive strays clip to zero instead of erroring.
        assert_eq!(quantize_bn(0.3, c11), 0.0);
    }

    #[test]
    fn bn_negative_fractional_bits_coarsen_the_grid() {
        let cfg = BnQuantConfig::new(4, -2).unwrap();
        // Step is 4: outputs are multiples of 4 in [-12, 0].
        assert_eq!(cfg.step(), 4.0);
        assert_eq!(cfg.max_magnitude(), 12.0);
        assert_eq!(quantize_bn(-5.9, cfg), -4.0);
        assert_eq!(quantize_bn(-6.0, cfg), -8.0); // half away from zero
        assert_eq!(quantize_bn(-30.0, cfg), -12.0);
    }

    #[test]
    fn bn_config_validation() {
        assert!(BnQuantConfig::new(0, 3).is_err());
        assert!(BnQuantConfig::new(2, -2).is_err()); // total bits 0
        assert!(BnQuantConfig::new(1, 0).is_ok());
    }

    #[test]
    fn dnn_examples() {
        let b3 = DnnQuantConfig::new(3).unwrap();
        assert_eq!(quantize_dnn(-1.0, b3), -1.0);
        let b1 = DnnQuantConfig::new(1).unwrap();
        assert_eq!(quantize_dnn(2.0, b1), 1.0);
        let b2 = DnnQuantConfig::new(2).unwrap();
        assert_abs_diff_eq!(quantize_dnn(0.3, b2), 1.0 / 3.0, epsilon = 0.0);
        assert!(DnnQuantConfig::new(0).is_err());
        assert!(DnnQuantConfig::new(33).is_err());
    }

    #[test]
    fn sign_examples() {
        assert_eq!(stochastic_sign(1.0, 0.999), 1.0);
        assert_eq!(stochastic_sign(-1.0, 0.001), -1.0);
        let freq = (0..10_000)
            .map(|i| stochastic_sign(0.0, (i as f64 + 0.5) / 10_000.0))
            .filter(|&s| s == 1.0)
            .count() as f64
            / 10_000.0;
        assert!((freq - 0.5).abs() < 0.02, "got {freq}");

        assert_eq!(sign_backward(0.0, 1.0), 1.0);
        assert!(sign_backward(10.0, 1.0).abs() < 1e-7);
        assert_abs_diff_eq!(sign_backward(0.5, 2.0), 1.5731, epsilon = 1e-3);
    }

    #[test]
    fn backward_rules_are_identity() {
        assert_eq!(quantize_bn_backward(0.3), 0.3);
        assert_eq!(quantize_dnn_backward(-1.25), -1.25);
    }

    proptest! {
        #[test]
        fn bn_idempotent_and_on_grid(
            theta in -20.0f64..1.0,
            bi in 1u32..=6,
            bf in -3i32..=7,
        ) {
            prop_assume!(bi as i64 + bf as i64 >= 1);
            let cfg = BnQuantConfig::new(bi, bf).unwrap();
            let q = quantize_bn(theta, cfg);
            prop_assert!(q <= 0.0 && q >= -cfg.max_magnitude());
            prop_assert_eq!(quantize_bn(q, cfg), q);
            // Grid membership: q * 2^bf is an integer (exact for power-of-two
            // scales).
            let scaled = q * (cfg.bf as f64).exp2();
            prop_assert_eq!(scaled.fract(), 0.0);
        }

        #[test]
        fn bn_monotone(
            a in -20.0f64..1.0,
            b in -20.0f64..1.0,
            bi in 1u32..=6,
            bf in -3i32..=7,
        ) {
            prop_assume!(bi as i64 + bf as i64 >= 1);
            let cfg = BnQuantConfig::new(bi, bf).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(quantize_bn(lo, cfg) <= quantize_bn(hi, cfg));
        }

        #[test]
        fn dnn_idempotent_monotone_on_grid(
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
            bits in 1u32..=8,
        ) {
            let cfg = DnnQuantConfig::new(bits).unwrap();
            let qa = quantize_dnn(a, cfg);
            prop_assert!((-1.0..=1.0).contains(&qa));
            prop_assert_eq!(quantize_dnn(qa, cfg), qa);
            // Exact grid membership via the defining expression.
            let n = cfg.levels();
            let k = ((qa + 1.0) / 2.0 * n).round();
            prop_assert!(k >= 0.0 && k <= n);
            prop_assert_eq!((2.0 * k - n) / n, qa);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(quantize_dnn(lo, cfg) <= quantize_dnn(hi, cfg));
        }
    }
}
