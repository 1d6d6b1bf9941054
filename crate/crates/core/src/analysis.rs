//! Filter-norm statistics, pre-activation feature means, and procedural
//! common-corruption evaluation.
//!
//! A "filter" is one 2-D 3x3 kernel slice, so a conv layer with C_out output
//! and C_in input channels contributes C_out * C_in filters. The L-infinity
//! norm of a filter (max |w| over its 9 entries) bounds how much one input
//! patch coordinate can move the corresponding output, which is why its layer
//! statistics serve as a per-layer Lipschitz proxy.

use serde::{Deserialize, Serialize};

use crate::data::DatasetHandle;
use crate::error::{Error, Result};
use crate::model::{BlockKind, Checkpoint, Network, TapMap};
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorms {
    pub layer: String,
    pub filter_count: usize,
    pub mean_linf: f64,
    pub max_linf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterNormReport {
    pub layers: Vec<LayerNorms>,
}

impl FilterNormReport {
    /// CSV export: layer, count, mean_linf, max_linf.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,filter_count,mean_linf,max_linf\n");
        for l in &self.layers {
            out.push_str(&format!(
                "{},{},{},{}\n",
                l.layer, l.filter_count, l.mean_linf, l.max_linf
            ));
        }
        out
    }
}

/// Conv weight parameter names in declaration order.
fn conv_weight_names(net: &Network) -> Vec<String> {
    let mut names = Vec::new();
    for block in &net.blocks {
        match block.kind {
            BlockKind::Conv => names.push(format!("{}.w", block.name)),
            BlockKind::ResidualConv => {
                names.push(format!("{}.conv_a.w", block.name));
                names.push(format!("{}.conv_b.w", block.name));
            }
            _ => {}
        }
    }
    names
}

/// Mean and max L-infinity filter norm per conv layer, in declaration order.
pub fn filter_norms(net: &Network) -> Result<FilterNormReport> {
    let names = conv_weight_names(net);
    if names.is_empty() {
        return Err(Error::InvalidArgument("network has no conv layers".into()));
    }
    let mut layers = Vec::with_capacity(names.len());
    for name in names {
        let w = net
            .params
            .get(&name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))?;
        let filters = w.shape()[0] * w.shape()[1];
        let mut sum = 0.0;
        let mut max = 0.0f64;
        for f in 0..filters {
            let slice = &w.data()[f * 9..(f + 1) * 9];
            let norm = slice.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
            sum += norm;
            max = max.max(norm);
        }
        layers.push(LayerNorms {
            layer: name,
            filter_count: filters,
            mean_linf: sum / filters as f64,
            max_linf: max,
        });
    }
    Ok(FilterNormReport { layers })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreActStats {
    pub tap: String,
    pub mean: f64,
    pub count: usize,
}

/// Mean of all elements of the tapped (pre-transform) feature over a dataset.
///
/// Streams in dataset-element order with compensated summation, so the result
/// is invariant to how the dataset is partitioned into batches.
pub fn preact_mean(
    net: &Network,
    data: &DatasetHandle,
    tap: &str,
    batch_size: usize,
) -> Result<PreActStats> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    let mut sum = 0.0f64;
    let mut comp = 0.0f64; // Kahan compensation
    let mut count = 0usize;
    for chunk in data.chunks(batch_size) {
        let (batch, _) = data.batch(&chunk);
        let (_, features) = net.forward(&batch, &TapMap::new())?;
        let feat = features
            .get(tap)
            .ok_or_else(|| Error::UnknownTapPoint(tap.to_string()))?;
        for &v in feat.data() {
            let y = v - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        count += feat.numel();
    }
    Ok(PreActStats { tap: tap.to_string(), mean: sum / count as f64, count })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ImpulseNoise,
    Brightness,
    Contrast,
    Pixelate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::Pixelate,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Pixelate => "pixelate",
        }
    }
}

/// Severity parameter tables (index = severity - 1; severity 0 is identity
/// for every kind).
pub const GAUSSIAN_SIGMA: [f64; 5] = [0.04, 0.08, 0.12, 0.16, 0.20];
/// Fraction of pixels replaced by salt (1.0) or pepper (0.0).
pub const IMPULSE_FRACTION: [f64; 5] = [0.01, 0.03, 0.05, 0.08, 0.12];
/// Additive brightness shift.
pub const BRIGHTNESS_SHIFT: [f64; 5] = [0.05, 0.10, 0.15, 0.20, 0.25];
/// Contrast scaling factor about mid-gray 0.5.
pub const CONTRAST_FACTOR: [f64; 5] = [0.85, 0.70, 0.55, 0.40, 0.25];
/// Pixelation block edge length (block averaging; 1 is the identity).
pub const PIXELATE_BLOCK: [usize; 5] = [2, 3, 4, 6, 8];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    /// 0 (identity) through 5.
    pub severity: u32,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u32, seed: u64) -> Result<Self> {
        if severity > 5 {
            return Err(Error::InvalidArgument(format!(
                "severity must be 0..=5, got {severity}"
            )));
        }
        Ok(CorruptionSpec { kind, severity, seed })
    }
}

/// Apply a corruption to an N x C x H x W batch; output clipped to [0, 1].
pub fn corrupt(batch: &Tensor, spec: &CorruptionSpec) -> Result<Tensor> {
    if spec.severity > 5 {
        return Err(Error::InvalidArgument(format!(
            "severity must be 0..=5, got {}",
            spec.severity
        )));
    }
    if spec.severity == 0 {
        return Ok(batch.clone());
    }
    let level = (spec.severity - 1) as usize;
    let mut rng = rng_from_seed(derive_seed(spec.seed, spec.kind.name()));
    let mut data = batch.data().to_vec();
    match spec.kind {
        CorruptionKind::GaussianNoise => {
            let sigma = GAUSSIAN_SIGMA[level];
            let mut i = 0;
            while i < data.len() {
                // Box-Muller from two uniforms; use both normals.
                let u1: f64 = loop {
                    let v = rand::Rng::gen::<f64>(&mut rng);
                    if v > 0.0 {
                        break v;
                    }
                };
                let u2: f64 = rand::Rng::gen(&mut rng);
                let r = (-2.0 * u1.ln()).sqrt();
                let theta = 2.0 * std::f64::consts::PI * u2;
                data[i] += sigma * r * theta.cos();
                if i + 1 < data.len() {
                    data[i + 1] += sigma * r * theta.sin();
                }
                i += 2;
            }
        }
        CorruptionKind::ImpulseNoise => {
            let p = IMPULSE_FRACTION[level];
            for v in data.iter_mut() {
                if rand::Rng::gen::<f64>(&mut rng) < p {
                    *v = if rand::Rng::gen::<bool>(&mut rng) { 1.0 } else { 0.0 };
                }
            }
        }
        CorruptionKind::Brightness => {
            let c = BRIGHTNESS_SHIFT[level];
            for v in data.iter_mut() {
                *v += c;
            }
        }
        CorruptionKind::Contrast => {
            let f = CONTRAST_FACTOR[level];
            for v in data.iter_mut() {
                *v = 0.5 + f * (*v - 0.5);
            }
        }
        CorruptionKind::Pixelate => {
            let block = PIXELATE_BLOCK[level];
            pixelate(&mut data, batch.shape(), block);
        }
    }
    for v in data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new(batch.shape().to_vec(), data)
}

/// Replace each b x b block (edge blocks may be smaller) by its mean.
fn pixelate(data: &mut [f64], shape: &[usize], block: usize) {
    if block <= 1 {
        return;
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    for img in 0..n * c {
        let plane = &mut data[img * h * w..(img + 1) * h * w];
        for by in (0..h).step_by(block) {
            for bx in (0..w).step_by(block) {
                let y1 = (by + block).min(h);
                let x1 = (bx + block).min(w);
                let mut sum = 0.0;
                for y in by..y1 {
                    for x in bx..x1 {
                        sum += plane[y * w + x];
                    }
                }
                let mean = sum / ((y1 - by) * (x1 - bx)) as f64;
                for y in by..y1 {
                    for x in bx..x1 {
                        plane[y * w + x] = mean;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionCell {
    pub model_epsilon: u32,
    pub kind: CorruptionKind,
    pub severity: u32,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionTable {
    pub cells: Vec<CorruptionCell>,
    /// Per-model average accuracy across all corruption cells, keyed by the
    /// model epsilon in checkpoint order.
    pub per_model_average: Vec<(u32, f64)>,
}

/// Accuracy of each checkpoint on each corrupted copy of `data`, plus the
/// per-model average across corruptions.
pub fn corruption_eval(
    checkpoints: &[Checkpoint],
    specs: &[CorruptionSpec],
    data: &DatasetHandle,
    batch_size: usize,
) -> Result<CorruptionTable> {
    if checkpoints.is_empty() || specs.is_empty() || data.is_empty() {
        return Err(Error::InvalidArgument(
            "corruption_eval needs checkpoints, specs, and data".into(),
        ));
    }
    let mut cells = Vec::new();
    let mut per_model_average = Vec::new();
    for ckpt in checkpoints {
        let mut model_sum = 0.0;
        for spec in specs {
            let mut correct = 0usize;
            for chunk in data.chunks(batch_size) {
                let (batch, labels) = data.batch(&chunk);
                let corrupted = corrupt(&batch, spec)?;
                let preds = ckpt.network.predict(&corrupted, &TapMap::new())?;
                correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
            }
            let accuracy = 100.0 * correct as f64 / data.len() as f64;
            model_sum += accuracy;
            cells.push(CorruptionCell {
                model_epsilon: ckpt.meta.epsilon_int,
                kind: spec.kind,
                severity: spec.severity,
                accuracy,
            });
        }
        per_model_average.push((ckpt.meta.epsilon_int, model_sum / specs.len() as f64));
    }
    Ok(CorruptionTable { cells, per_model_average })
}
