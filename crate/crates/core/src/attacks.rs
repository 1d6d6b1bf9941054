//! L-infinity PGD attack and the adaptive evaluations built on it.
//!
//! The iterate is x^{i+1} = project(x^i + alpha * sign(grad_x loss)), with the
//! projection clipping per coordinate into the epsilon/255 ball around the
//! clean input and then (by default) into the valid pixel range [0, 1].
//!
//! BPDA runs the same loop through the true (quantized) forward while
//! gradients flow through the declared identity backward. Transfer PGD crafts
//! the perturbation against the bare model and evaluates it on the defended
//! forward.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax_rows, Network, TapMap};
use crate::rng::rng_from_seed;
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Integer perturbation strength; the ball radius is epsilon_int / 255.
    pub epsilon_int: u32,
    /// Number of PGD steps.
    pub steps: usize,
    /// Step size in pixel units; defaults to (epsilon/8) * (2/255) when unset,
    /// which takes the usual value 2/255 at epsilon = 8.
    pub alpha: Option<f64>,
    pub random_start: bool,
    pub seed: u64,
    /// Clip iterates to [0, 1] in addition to the ball projection.
    pub clamp_to_pixel_range: bool,
}

impl AttackConfig {
    pub fn new(epsilon_int: u32, steps: usize, seed: u64) -> Self {
        AttackConfig {
            epsilon_int,
            steps,
            alpha: None,
            random_start: true,
            seed,
            clamp_to_pixel_range: true,
        }
    }

    pub fn radius(&self) -> f64 {
        self.epsilon_int as f64 / 255.0
    }

    pub fn resolved_alpha(&self) -> f64 {
        self.alpha
            .unwrap_or(self.epsilon_int as f64 / 8.0 * (2.0 / 255.0))
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::InvalidArgument("attack needs at least one step".into()));
        }
        if let Some(a) = self.alpha {
            if !(a.is_finite() && a >= 0.0) {
                return Err(Error::InvalidArgument(format!("invalid step size {a}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub adversarial_batch: Tensor,
    /// Per-example L-infinity distance to the clean input.
    pub linf_distances: Vec<f64>,
    /// Mean batch loss at x^0 .. x^N (steps + 1 entries).
    pub loss_trace: Vec<f64>,
    /// Per-example flag: prediction differs from the label.
    pub success_mask: Vec<bool>,
}

impl AttackResult {
    /// Fraction of examples still classified correctly, in percent.
    pub fn accuracy(&self) -> f64 {
        let correct = self.success_mask.iter().filter(|&&s| !s).count();
        100.0 * correct as f64 / self.success_mask.len() as f64
    }
}

fn per_example_linf(clean: &Tensor, adv: &Tensor) -> Vec<f64> {
    let n = clean.shape()[0];
    let stride = clean.numel() / n;
    (0..n)
        .map(|i| {
            clean.data()[i * stride..(i + 1) * stride]
                .iter()
                .zip(&adv.data()[i * stride..(i + 1) * stride])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        })
        .collect()
}

/// One forward pass; returns (mean loss, gradient w.r.t. the input).
fn loss_and_input_grad(
    net: &Network,
    taps: &TapMap,
    x: &Tensor,
    labels: &[usize],
) -> Result<(f64, Tensor)> {
    let mut g = Graph::new();
    let input = g.leaf(x.clone(), true);
    let binding = net.bind(&mut g, false);
    let out = net.forward_bound(&mut g, &binding, input, taps)?;
    let loss = g.softmax_cross_entropy(out.logits, labels)?;
    let loss_value = g.value(loss).item();
    g.backward(loss)?;
    let grad = g
        .grad(input)
        .ok_or_else(|| Error::InvalidArgument("input gradient missing".into()))?;
    Ok((loss_value, grad))
}

fn mean_loss(net: &Network, taps: &TapMap, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let input = g.leaf(x.clone(), false);
    let binding = net.bind(&mut g, false);
    let out = net.forward_bound(&mut g, &binding, input, taps)?;
    let loss = g.softmax_cross_entropy(out.logits, labels)?;
    Ok(g.value(loss).item())
}

/// Inner PGD loop: returns the adversarial batch and the loss trace.
fn pgd_iterates(
    net: &Network,
    taps: &TapMap,
    batch: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<(Tensor, Vec<f64>)> {
    cfg.validate()?;
    let radius = cfg.radius();
    let alpha = cfg.resolved_alpha();

    let mut x = batch.clone();
    if cfg.random_start && cfg.epsilon_int > 0 {
        let mut rng = rng_from_seed(cfg.seed);
        for (xv, &clean) in x.data_mut().iter_mut().zip(batch.data()) {
            let u: f64 = rng.gen::<f64>() * 2.0 - 1.0;
            let mut v = clean + u * radius;
            if cfg.clamp_to_pixel_range {
                v = v.clamp(0.0, 1.0);
            }
            *xv = v;
        }
    }

    let mut trace = Vec::with_capacity(cfg.steps + 1);
    for _ in 0..cfg.steps {
        let (loss, grad) = loss_and_input_grad(net, taps, &x, labels)?;
        trace.push(loss);
        let step = grad.sign();
        for ((xv, &s), &clean) in x.data_mut().iter_mut().zip(step.data()).zip(batch.data()) {
            let mut v = *xv + alpha * s;
            v = v.clamp(clean - radius, clean + radius);
            if cfg.clamp_to_pixel_range {
                v = v.clamp(0.0, 1.0);
            }
            *xv = v;
        }
    }
    trace.push(mean_loss(net, taps, &x, labels)?);
    Ok((x, trace))
}

fn evaluate(
    net: &Network,
    taps: &TapMap,
    clean: &Tensor,
    adv: Tensor,
    labels: &[usize],
    trace: Vec<f64>,
) -> Result<AttackResult> {
    let preds = net.predict(&adv, taps)?;
    let success_mask = preds.iter().zip(labels).map(|(p, l)| p != l).collect();
    Ok(AttackResult {
        linf_distances: per_example_linf(clean, &adv),
        adversarial_batch: adv,
        loss_trace: trace,
        success_mask,
    })
}

/// White-box PGD. Any taps are part of the attacked forward (gradients flow
/// through their declared backward).
pub fn pgd(
    net: &Network,
    taps: &TapMap,
    batch: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    let (adv, trace) = pgd_iterates(net, taps, batch, labels, cfg)?;
    evaluate(net, taps, batch, adv, labels, trace)
}

/// BPDA: forward through the true (non-differentiable) defense taps, gradient
/// through their identity backward approximation.
pub fn bpda_pgd(
    net: &Network,
    defense_taps: &TapMap,
    batch: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    // Floor quantization declares identity backward on the tape, so the same
    // loop realizes the approximation.
    pgd(net, defense_taps, batch, labels, cfg)
}

/// Transfer PGD: craft the perturbation against the bare model, evaluate the
/// defended (tap-adapted) forward.
pub fn transfer_pgd(
    base_net: &Network,
    defended_taps: &TapMap,
    batch: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    let none = TapMap::new();
    let (adv, trace) = pgd_iterates(base_net, &none, batch, labels, cfg)?;
    evaluate(base_net, defended_taps, batch, adv, labels, trace)
}

/// Clean accuracy in percent of the (possibly defended) model on a batch.
pub fn clean_accuracy(net: &Network, taps: &TapMap, batch: &Tensor, labels: &[usize]) -> Result<f64> {
    let logits = net.logits(batch, taps)?;
    let preds = argmax_rows(&logits);
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build, Activation, Arch, FeatureTransform};

    fn test_net(seed: u64) -> Network {
        build(Arch::TinyCnn, 1, 2, Activation::Relu, seed).unwrap()
    }

    fn test_batch(n: usize, seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = rng_from_seed(seed);
        let data = (0..n * 64).map(|_| rng.gen::<f64>()).collect();
        let batch = Tensor::new(vec![n, 1, 8, 8], data).unwrap();
        let labels = (0..n).map(|i| i % 2).collect();
        (batch, labels)
    }

    #[test]
    fn default_alpha_matches_rule() {
        let cfg = AttackConfig::new(8, 20, 0);
        assert_eq!(cfg.resolved_alpha(), 2.0 / 255.0);
        let cfg4 = AttackConfig::new(4, 20, 0);
        assert_eq!(cfg4.resolved_alpha(), 4.0 / 8.0 * 2.0 / 255.0);
    }

    #[test]
    fn zero_epsilon_returns_clean_input_bitwise() {
        let net = test_net(1);
        let (batch, labels) = test_batch(4, 2);
        let mut cfg = AttackConfig::new(0, 5, 3);
        cfg.random_start = false;
        let result = pgd(&net, &TapMap::new(), &batch, &labels, &cfg).unwrap();
        assert_eq!(result.adversarial_batch, batch);
        // success mask equals clean misclassification
        let preds = net.predict(&batch, &TapMap::new()).unwrap();
        let clean_mask: Vec<bool> = preds.iter().zip(&labels).map(|(p, l)| p != l).collect();
        assert_eq!(result.success_mask, clean_mask);
    }

    #[test]
    fn projection_clips_to_ball() {
        // candidate 0.6 around clean 0.5 at eps=8 projects to 0.5 + 8/255
        let clean = 0.5f64;
        let radius = 8.0 / 255.0;
        let projected = 0.6f64.clamp(clean - radius, clean + radius);
        assert!((projected - (0.5 + 8.0 / 255.0)).abs() < 1e-15);
        assert!((projected - 0.531372549).abs() < 1e-6);
    }

    #[test]
    fn feasibility_and_determinism() {
        let net = test_net(4);
        let (batch, labels) = test_batch(8, 5);
        for eps in [0u32, 2, 4, 8] {
            let cfg = AttackConfig::new(eps, 10, 7);
            let r1 = pgd(&net, &TapMap::new(), &batch, &labels, &cfg).unwrap();
            let r2 = pgd(&net, &TapMap::new(), &batch, &labels, &cfg).unwrap();
            assert_eq!(r1.adversarial_batch, r2.adversarial_batch);
            assert_eq!(r1.success_mask, r2.success_mask);
            let radius = eps as f64 / 255.0;
            for &d in &r1.linf_distances {
                assert!(d <= radius + 1e-12, "distance {d} exceeds {radius}");
            }
            assert!(r1
                .adversarial_batch
                .data()
                .iter()
                .all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn identity_defense_taps_match_plain_pgd() {
        let net = test_net(6);
        let (batch, labels) = test_batch(4, 8);
        let cfg = AttackConfig::new(4, 8, 11);
        let mut taps = TapMap::new();
        taps.insert("conv0".into(), FeatureTransform::Identity);
        let plain = pgd(&net, &TapMap::new(), &batch, &labels, &cfg).unwrap();
        let defended = bpda_pgd(&net, &taps, &batch, &labels, &cfg).unwrap();
        assert_eq!(plain.adversarial_batch, defended.adversarial_batch);
        assert_eq!(plain.success_mask, defended.success_mask);
    }

    #[test]
    fn transfer_reuses_bare_model_perturbation() {
        let net = test_net(9);
        let (batch, labels) = test_batch(4, 10);
        let cfg = AttackConfig::new(8, 8, 13);
        let mut taps = TapMap::new();
        taps.insert("conv0".into(), FeatureTransform::FloorQuant { beta: 8.0 });
        let bare = pgd(&net, &TapMap::new(), &batch, &labels, &cfg).unwrap();
        let transfer = transfer_pgd(&net, &taps, &batch, &labels, &cfg).unwrap();
        assert_eq!(bare.adversarial_batch, transfer.adversarial_batch);
    }

    #[test]
    fn transfer_with_identity_taps_equals_whitebox_accuracy() {
        let net = test_net(12);
        let (batch, labels) = test_batch(6, 14);
        let cfg = AttackConfig::new(4, 6, 15);
        let white = pgd(&net, &TapMap::new(), &batch, &labels, &cfg).unwrap();
        let transfer = transfer_pgd(&net, &TapMap::new(), &batch, &labels, &cfg).unwrap();
        assert_eq!(white.accuracy(), transfer.accuracy());
    }

    #[test]
    fn zero_delta_transfer_equals_clean_defended_accuracy() {
        let net = test_net(16);
        let (batch, labels) = test_batch(6, 17);
        let mut cfg = AttackConfig::new(0, 5, 18);
        cfg.random_start = false;
        let mut taps = TapMap::new();
        taps.insert("conv0".into(), FeatureTransform::FloorQuant { beta: 8.0 });
        let transfer = transfer_pgd(&net, &taps, &batch, &labels, &cfg).unwrap();
        let clean = clean_accuracy(&net, &taps, &batch, &labels).unwrap();
        assert_eq!(transfer.accuracy(), clean);
    }

    #[test]
    fn ball_nesting_projection_is_identity() {
        // A point feasible at eps1 projected into an eps2 >= eps1 ball is unchanged.
        let clean = 0.4f64;
        let feasible = clean + 1.5 / 255.0; // inside eps=2 ball
        for eps2 in [2u32, 4, 8] {
            let r = eps2 as f64 / 255.0;
            assert_eq!(feasible.clamp(clean - r, clean + r), feasible);
        }
    }

    #[test]
    fn invalid_steps_rejected() {
        let net = test_net(20);
        let (batch, labels) = test_batch(2, 21);
        let cfg = AttackConfig::new(4, 0, 22);
        assert!(pgd(&net, &TapMap::new(), &batch, &labels, &cfg).is_err());
    }
}
