//! PGD adversarial training and the spectrum protocol.
//!
//! Training solves the min-max objective: each step replaces the batch by its
//! PGD perturbation at the training strength, then applies one SGD step with
//! momentum and weight decay on the cross-entropy of the adversarial batch.
//! The spectrum protocol trains one model per epsilon, evaluates the
//! (model epsilon x attack delta) robust-error grid, and selects the
//! overdesigned model for a given attack strength.

use serde::{Deserialize, Serialize};

use crate::attacks::{clean_accuracy, pgd, AttackConfig};
use crate::data::{DatasetHandle, Split};
use crate::error::{Error, Result};
use crate::model::{build, Activation, Arch, Checkpoint, Network, TapMap, TrainMeta};
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::Graph;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epsilon_int: u32,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr: f64,
    /// Epochs (0-based) at which the learning rate is multiplied by
    /// `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    /// Inner-maximization attack; its epsilon always equals `epsilon_int`.
    pub pgd: AttackConfig,
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale defaults: a scaled echo of the full-scale schedule
    /// (momentum 0.9, weight decay 2e-4, lr divided by 10 late in training).
    pub fn desk(epsilon_int: u32, seed: u64) -> Self {
        let mut pgd = AttackConfig::new(epsilon_int, 5, seed);
        pgd.random_start = true;
        TrainConfig {
            epsilon_int,
            epochs: 15,
            batch_size: 64,
            momentum: 0.9,
            weight_decay: 2e-4,
            lr: 0.05,
            lr_decay_epochs: vec![10, 13],
            lr_decay_factor: 0.1,
            pgd,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.pgd.epsilon_int != self.epsilon_int {
            return Err(Error::Config(format!(
                "inner attack epsilon {} must equal the training epsilon {}",
                self.pgd.epsilon_int, self.epsilon_int
            )));
        }
        self.pgd.validate()
    }

    /// Switch the training (and inner attack) strength, keeping other fields.
    pub fn with_epsilon(&self, epsilon_int: u32) -> Self {
        let mut cfg = self.clone();
        cfg.epsilon_int = epsilon_int;
        cfg.pgd.epsilon_int = epsilon_int;
        cfg
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.seed = seed;
        cfg.pgd.seed = seed;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub mean_train_loss: f64,
    pub val_clean_err: f64,
    pub val_robust_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessGrid {
    pub model_epsilons: Vec<u32>,
    pub attack_deltas: Vec<u32>,
    /// errors[i][j] = robust error (percent) of model epsilon_i under attack
    /// delta_j.
    pub errors: Vec<Vec<f64>>,
    pub clean_errors: Vec<f64>,
}

impl RobustnessGrid {
    pub fn row(&self, delta: u32) -> Option<Vec<f64>> {
        let j = self.attack_deltas.iter().position(|&d| d == delta)?;
        Some(self.errors.iter().map(|r| r[j]).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    GridArgmin,
    EarlyStop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverdesignChoice {
    pub delta: u32,
    pub epsilon_star: u32,
    pub selection_mode: SelectionMode,
}

/// Robust (or clean, at delta 0) error of a model over a full dataset,
/// evaluated in batches with per-batch derived attack seeds.
pub fn robust_error(
    net: &Network,
    data: &DatasetHandle,
    delta: u32,
    steps: usize,
    batch_size: usize,
    seed: u64,
) -> Result<f64> {
    let mut correct = 0usize;
    for (b, chunk) in data.chunks(batch_size).iter().enumerate() {
        let (batch, labels) = data.batch(chunk);
        if delta == 0 {
            let acc = clean_accuracy(net, &TapMap::new(), &batch, &labels)?;
            correct += (acc / 100.0 * labels.len() as f64).round() as usize;
        } else {
            let mut cfg = AttackConfig::new(delta, steps, derive_seed(seed, &format!("batch/{b}")));
            cfg.random_start = true;
            let result = pgd(net, &TapMap::new(), &batch, &labels, &cfg)?;
            correct += result.success_mask.iter().filter(|&&s| !s).count();
        }
    }
    Ok(100.0 - 100.0 * correct as f64 / data.len() as f64)
}

/// One SGD-with-momentum step on the cross-entropy of `batch`.
fn sgd_step(
    net: &mut Network,
    velocity: &mut std::collections::BTreeMap<String, Vec<f64>>,
    batch: &crate::tensor::Tensor,
    labels: &[usize],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let input = g.leaf(batch.clone(), false);
    let binding = net.bind(&mut g, true);
    let out = net.forward_bound(&mut g, &binding, input, &TapMap::new())?;
    let loss = g.softmax_cross_entropy(out.logits, labels)?;
    let loss_value = g.value(loss).item();
    g.backward(loss)?;
    for (name, &id) in &binding.params {
        let grad = g
            .grad(id)
            .ok_or_else(|| Error::InvalidArgument(format!("missing gradient for {name}")))?;
        let param = net.params.get_mut(name).expect("bound param exists");
        let v = velocity.entry(name.clone()).or_insert_with(|| vec![0.0; param.numel()]);
        for ((p, vel), &gv) in param.data_mut().iter_mut().zip(v.iter_mut()).zip(grad.data()) {
            *vel = momentum * *vel + gv + weight_decay * *p;
            *p -= lr * *vel;
        }
    }
    Ok(loss_value)
}

/// Adversarially train `net` in place; returns the best-validation-epoch
/// network and per-epoch metrics.
pub fn adversarial_train(
    mut net: Network,
    data: &DatasetHandle,
    cfg: &TrainConfig,
) -> Result<(Network, TrainMeta, Vec<EpochMetrics>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    // Held-out validation split: a seed-fixed 10% of the training data.
    let mut indices: Vec<usize> = (0..data.len()).collect();
    shuffle(&mut indices, derive_seed(cfg.seed, "val_split"));
    let val_len = (data.len() / 10).max(1);
    let val = data.subset(&indices[..val_len], Split::Validation);
    let train_indices = indices[val_len..].to_vec();

    let mut velocity = std::collections::BTreeMap::new();
    let mut lr = cfg.lr;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Network)> = None;
    let mut global_step = 0usize;

    for epoch in 0..cfg.epochs {
        if cfg.lr_decay_epochs.contains(&epoch) {
            lr *= cfg.lr_decay_factor;
        }
        let mut order = train_indices.clone();
        shuffle(&mut order, derive_seed(cfg.seed, &format!("shuffle/{epoch}")));
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (batch, labels) = data.batch(chunk);
            // Inner maximization: replace the batch by its PGD perturbation.
            let mut inner = cfg.pgd.clone();
            inner.seed = derive_seed(cfg.seed, &format!("attack/{epoch}/{b}"));
            let adv = pgd(&net, &TapMap::new(), &batch, &labels, &inner)?.adversarial_batch;
            let loss = sgd_step(
                &mut net,
                &mut velocity,
                &adv,
                &labels,
                lr,
                cfg.momentum,
                cfg.weight_decay,
            )?;
            if !loss.is_finite() {
                return Err(Error::Diverged { step: global_step });
            }
            epoch_loss += loss;
            batches += 1;
            global_step += 1;
        }

        let val_clean_err = robust_error(&net, &val, 0, 1, cfg.batch_size, 0)?;
        let val_robust_err = if cfg.epsilon_int == 0 {
            val_clean_err
        } else {
            robust_error(
                &net,
                &val,
                cfg.epsilon_int,
                cfg.pgd.steps,
                cfg.batch_size,
                derive_seed(cfg.seed, &format!("val_attack/{epoch}")),
            )?
        };
        metrics.push(EpochMetrics {
            epoch,
            lr,
            mean_train_loss: epoch_loss / batches.max(1) as f64,
            val_clean_err,
            val_robust_err,
        });
        let better = match &best {
            None => true,
            Some((err, _, _)) => val_robust_err < *err,
        };
        if better {
            best = Some((val_robust_err, epoch, net.clone()));
        }
    }

    let (_, best_epoch, best_net) = best.expect("at least one epoch ran");
    let meta = TrainMeta {
        epsilon_int: cfg.epsilon_int,
        epoch: best_epoch,
        seed: cfg.seed,
        best_checkpoint_criterion: "robust validation error at the training epsilon".into(),
    };
    Ok((best_net, meta, metrics))
}

/// Fisher-Yates with a derived ChaCha stream.
fn shuffle(indices: &mut [usize], seed: u64) {
    let mut rng = rng_from_seed(seed);
    for i in (1..indices.len()).rev() {
        let j = rand::Rng::gen_range(&mut rng, 0..=i);
        indices.swap(i, j);
    }
}

/// Train one model per epsilon. Per-job seed combines the base seed with the
/// epsilon via the documented splitting rule.
pub fn train_spectrum(
    arch: Arch,
    activation: Activation,
    epsilons: &[u32],
    base_cfg: &TrainConfig,
    data: &DatasetHandle,
) -> Result<Vec<(Checkpoint, Vec<EpochMetrics>)>> {
    if epsilons.is_empty() {
        return Err(Error::Config("epsilon list is empty".into()));
    }
    if !epsilons.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Config("epsilon list must be strictly increasing".into()));
    }
    let (c, _, _) = data.example_shape();
    let mut out = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let job_seed = derive_seed(base_cfg.seed, &format!("spectrum/eps={eps}"));
        let cfg = base_cfg.with_epsilon(eps).with_seed(job_seed);
        let net = build(arch, c, data.num_classes(), activation, derive_seed(job_seed, "init"))?;
        let (trained, meta, metrics) = adversarial_train(net, data, &cfg)?;
        out.push((Checkpoint::new(trained, meta), metrics));
    }
    Ok(out)
}

/// Evaluate the robust-error grid: one row per model, one column per delta,
/// PGD with `steps` steps and the (delta/8)(2/255) step-size rule.
pub fn eval_grid(
    checkpoints: &[Checkpoint],
    deltas: &[u32],
    steps: usize,
    test: &DatasetHandle,
    batch_size: usize,
    seed: u64,
) -> Result<RobustnessGrid> {
    if checkpoints.is_empty() || deltas.is_empty() {
        return Err(Error::Config("eval_grid needs at least one checkpoint and one delta".into()));
    }
    let mut errors = Vec::with_capacity(checkpoints.len());
    let mut clean_errors = Vec::with_capacity(checkpoints.len());
    for ckpt in checkpoints {
        let eps = ckpt.meta.epsilon_int;
        let clean = robust_error(&ckpt.network, test, 0, 1, batch_size, 0)?;
        clean_errors.push(clean);
        let mut row = Vec::with_capacity(deltas.len());
        for &delta in deltas {
            let err = if delta == 0 {
                clean
            } else {
                robust_error(
                    &ckpt.network,
                    test,
                    delta,
                    steps,
                    batch_size,
                    derive_seed(seed, &format!("grid/eps={eps}/delta={delta}")),
                )?
            };
            row.push(err);
        }
        errors.push(row);
    }
    Ok(RobustnessGrid {
        model_epsilons: checkpoints.iter().map(|c| c.meta.epsilon_int).collect(),
        attack_deltas: deltas.to_vec(),
        errors,
        clean_errors,
    })
}

/// Overdesign selection on one grid row.
///
/// `GridArgmin` returns the smallest epsilon achieving the row minimum.
/// `EarlyStop` walks epsilon upward from the smallest epsilon above delta and
/// returns the last epsilon before the first strict error increase.
pub fn select_overdesign(
    grid: &RobustnessGrid,
    delta: u32,
    mode: SelectionMode,
) -> Result<OverdesignChoice> {
    let row = grid
        .row(delta)
        .ok_or_else(|| Error::InvalidArgument(format!("delta {delta} not in the grid")))?;
    if row.is_empty() {
        return Err(Error::InvalidArgument("empty grid row".into()));
    }
    let epsilon_star = match mode {
        SelectionMode::GridArgmin => {
            let mut best = 0usize;
            for (i, &e) in row.iter().enumerate() {
                if e < row[best] {
                    best = i;
                }
            }
            grid.model_epsilons[best]
        }
        SelectionMode::EarlyStop => {
            let start = grid
                .model_epsilons
                .iter()
                .position(|&e| e > delta)
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("no model epsilon above delta {delta}"))
                })?;
            let mut chosen = start;
            for i in start + 1..row.len() {
                if row[i] > row[chosen] {
                    break;
                }
                chosen = i;
            }
            grid.model_epsilons[chosen]
        }
    };
    Ok(OverdesignChoice { delta, epsilon_star, selection_mode: mode })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic;

    fn grid(epsilons: &[u32], delta: u32, row: &[f64]) -> RobustnessGrid {
        RobustnessGrid {
            model_epsilons: epsilons.to_vec(),
            attack_deltas: vec![delta],
            errors: row.iter().map(|&e| vec![e]).collect(),
            clean_errors: vec![0.0; epsilons.len()],
        }
    }

    #[test]
    fn argmin_tie_breaks_to_smallest_epsilon() {
        let g = grid(&[0, 1, 2, 3], 1, &[10.0, 8.0, 8.0, 9.0]);
        let choice = select_overdesign(&g, 1, SelectionMode::GridArgmin).unwrap();
        assert_eq!(choice.epsilon_star, 1);
    }

    #[test]
    fn strictly_decreasing_row_selects_largest() {
        let g = grid(&[0, 2, 4, 8], 2, &[30.0, 20.0, 15.0, 10.0]);
        for mode in [SelectionMode::GridArgmin, SelectionMode::EarlyStop] {
            let choice = select_overdesign(&g, 2, mode).unwrap();
            assert_eq!(choice.epsilon_star, 8, "{mode:?}");
        }
    }

    #[test]
    fn early_stop_returns_last_before_increase() {
        let g = grid(&[0, 1, 2, 3, 4], 1, &[10.0, 9.0, 8.0, 8.0, 9.5]);
        let choice = select_overdesign(&g, 1, SelectionMode::EarlyStop).unwrap();
        assert_eq!(choice.epsilon_star, 3);
    }

    #[test]
    fn argmin_invariant_under_constant_shift() {
        let row = [12.0, 9.0, 11.0, 10.0];
        let g1 = grid(&[0, 2, 4, 8], 4, &row);
        let shifted: Vec<f64> = row.iter().map(|e| e + 17.5).collect();
        let g2 = grid(&[0, 2, 4, 8], 4, &shifted);
        let c1 = select_overdesign(&g1, 4, SelectionMode::GridArgmin).unwrap();
        let c2 = select_overdesign(&g2, 4, SelectionMode::GridArgmin).unwrap();
        assert_eq!(c1.epsilon_star, c2.epsilon_star);
    }

    #[test]
    fn unknown_delta_rejected() {
        let g = grid(&[0, 2], 2, &[10.0, 9.0]);
        assert!(select_overdesign(&g, 3, SelectionMode::GridArgmin).is_err());
    }

    #[test]
    fn training_is_seed_deterministic() {
        let data = make_synthetic(2, 24, 8, 5).unwrap();
        let cfg = {
            let mut c = TrainConfig::desk(2, 99);
            c.epochs = 2;
            c.batch_size = 16;
            c.pgd.steps = 2;
            c.pgd.seed = 99;
            c
        };
        let net = build(Arch::TinyCnn, 1, 2, Activation::Relu, 1).unwrap();
        let (a, meta_a, _) = adversarial_train(net.clone(), &data, &cfg).unwrap();
        let (b, meta_b, _) = adversarial_train(net, &data, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(meta_a, meta_b);
    }

    #[test]
    fn zero_epsilon_training_is_standard_erm() {
        // With epsilon 0 the inner maximization is the identity, so the loop
        // must match a plain ERM loop with the same schedule, bitwise.
        let data = make_synthetic(2, 24, 8, 6).unwrap();
        let mut cfg = TrainConfig::desk(0, 123);
        cfg.epochs = 2;
        cfg.batch_size = 16;
        cfg.pgd.seed = 123;
        let net = build(Arch::TinyCnn, 1, 2, Activation::Relu, 2).unwrap();
        let (at_net, meta, _) = adversarial_train(net.clone(), &data, &cfg).unwrap();

        // Independent ERM loop mirroring the update rule, stopping at the
        // epoch the best-checkpoint selection picked.
        let mut erm = net;
        let mut indices: Vec<usize> = (0..data.len()).collect();
        shuffle(&mut indices, derive_seed(cfg.seed, "val_split"));
        let val_len = (data.len() / 10).max(1);
        let train_indices = indices[val_len..].to_vec();
        let mut velocity = std::collections::BTreeMap::new();
        for epoch in 0..=meta.epoch {
            let mut order = train_indices.clone();
            shuffle(&mut order, derive_seed(cfg.seed, &format!("shuffle/{epoch}")));
            for chunk in order.chunks(cfg.batch_size) {
                let (batch, labels) = data.batch(chunk);
                sgd_step(
                    &mut erm,
                    &mut velocity,
                    &batch,
                    &labels,
                    cfg.lr,
                    cfg.momentum,
                    cfg.weight_decay,
                )
                .unwrap();
            }
        }
        assert_eq!(at_net.params, erm.params);
    }

    #[test]
    fn spectrum_requires_increasing_epsilons() {
        let data = make_synthetic(2, 8, 8, 0).unwrap();
        let cfg = TrainConfig::desk(0, 1);
        let err = train_spectrum(Arch::TinyCnn, Activation::Relu, &[4, 2], &cfg, &data);
        assert!(err.is_err());
    }

    #[test]
    fn spectrum_records_epsilon_metadata() {
        let data = make_synthetic(2, 16, 8, 3).unwrap();
        let mut cfg = TrainConfig::desk(0, 7);
        cfg.epochs = 1;
        cfg.batch_size = 16;
        cfg.pgd.steps = 1;
        let out = train_spectrum(Arch::TinyCnn, Activation::Relu, &[0, 2], &cfg, &data).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].0.meta.epsilon_int, 0);
        assert_eq!(out[1].0.meta.epsilon_int, 2);
    }
}
