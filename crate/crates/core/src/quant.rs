//! Intermediate-feature quantization defense.
//!
//! Applies an elementwise scaled floor, floor(beta * x) / beta, to the
//! feature at a tap point. The transform is not differentiable; its declared
//! backward approximation is the identity, which is what adaptive attacks use.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FeatureTransform;
use crate::tensor::Tensor;

/// Default scaling factor; sweeps use [`BETA_SWEEP`].
pub const DEFAULT_BETA: f64 = 8.0;
/// Ablation sweep of scaling factors.
pub const BETA_SWEEP: [f64; 5] = [4.0, 6.0, 8.0, 10.0, 12.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackwardMode {
    Identity,
}

/// A quantization transform bound to a named tap point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantTap {
    pub beta: f64,
    pub tap_point: String,
    pub backward_mode: BackwardMode,
}

impl QuantTap {
    pub fn new(beta: f64, tap_point: impl Into<String>) -> Result<Self> {
        if beta <= 0.0 {
            return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
        }
        Ok(QuantTap { beta, tap_point: tap_point.into(), backward_mode: BackwardMode::Identity })
    }

    /// The (tap name, transform) pair consumable by network forward passes.
    pub fn as_tap(&self) -> (String, FeatureTransform) {
        (self.tap_point.clone(), FeatureTransform::FloorQuant { beta: self.beta })
    }
}

/// Elementwise floor(beta * x) / beta.
pub fn quantize(x: &Tensor, beta: f64) -> Result<Tensor> {
    if beta <= 0.0 {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    let data = x.data().iter().map(|&v| (beta * v).floor() / beta).collect();
    Tensor::new(x.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn direct_formula_examples() {
        let x = Tensor::new(vec![3], vec![0.13, 0.5, -0.13]).unwrap();
        let q = quantize(&x, 8.0).unwrap();
        assert_eq!(q.data(), &[0.125, 0.5, -0.25]);
    }

    #[test]
    fn rejects_nonpositive_beta() {
        let x = Tensor::zeros(&[2]);
        assert!(quantize(&x, 0.0).is_err());
        assert!(quantize(&x, -3.0).is_err());
        assert!(QuantTap::new(0.0, "conv0").is_err());
    }

    #[test]
    fn large_beta_approaches_identity() {
        let xs: Vec<f64> = (0..1000).map(|i| -10.0 + 0.02 * i as f64).collect();
        let t = Tensor::new(vec![xs.len()], xs.clone()).unwrap();
        let q = quantize(&t, 1e12).unwrap();
        for (a, b) in xs.iter().zip(q.data()) {
            assert!((a - b).abs() < 1e-11, "{a} vs {b}");
        }
    }

    #[test]
    fn zeros_stay_zeros() {
        let q = quantize(&Tensor::zeros(&[16]), 8.0).unwrap();
        assert!(q.data().iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn idempotent_and_bounded_for_pow2_beta(
            xs in proptest::collection::vec(-100.0f64..100.0, 1..64),
            exp in -2i32..6,
        ) {
            let beta = 2f64.powi(exp);
            let t = Tensor::new(vec![xs.len()], xs).unwrap();
            let q1 = quantize(&t, beta).unwrap();
            let q2 = quantize(&q1, beta).unwrap();
            prop_assert_eq!(q1.data(), q2.data());
            for (x, q) in t.data().iter().zip(q1.data()) {
                let r = x - q;
                prop_assert!((0.0..1.0 / beta).contains(&r), "residual {} at beta {}", r, beta);
            }
        }

        #[test]
        fn grid_points_are_fixed(k in -400i64..400, exp in 0i32..5) {
            let beta = 2f64.powi(exp);
            let x = k as f64 / beta;
            let t = Tensor::new(vec![1], vec![x]).unwrap();
            let q = quantize(&t, beta).unwrap();
            prop_assert_eq!(q.data()[0], x);
        }
    }
}
