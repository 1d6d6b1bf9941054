//! Dataset ingestion: CIFAR-10 binary batches and a synthetic desk dataset.
//!
//! The synthetic generator produces class-conditioned images with two kinds of
//! signal: a brightness patch over the top quarter of the image (perfectly
//! predictive, but its globally pooled contribution is small enough to be
//! flipped by moderate L-infinity perturbations) and a higher-amplitude
//! stripe template that is only mostly reliable (a seeded fraction of images
//! carry another class's stripes). Standard training leans on the patch
//! because it is the only perfect separator; adversarial training at a radius
//! beyond the patch's pooled amplitude must fall back on the stripes, which
//! is what makes the desk-scale spectrum experiments behave like their
//! full-scale counterparts.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::Tensor;

pub const CIFAR_RECORD_BYTES: usize = 3073;
pub const CIFAR_CLASSES: [&str; 10] = [
    "airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck",
];

/// Per-pixel amplitude of the fragile brightness patch. The patch covers a
/// quarter of the image, so its globally pooled signal is a quarter of this —
/// below the eps=4 attack radius (4/255 ~ 0.0157). A linear pooled reader is
/// flipped by the attack even though each patch pixel individually moves by
/// far less than its amplitude.
pub const FRAGILE_AMPLITUDE: f64 = 0.05;
/// Amplitude of the robust stripe template; well above the eps=8 radius.
pub const STRIPE_AMPLITUDE: f64 = 0.15;
/// Probability that an image carries its own class's stripe template.
pub const STRIPE_RELIABILITY: f64 = 0.75;
/// Gaussian pixel noise.
pub const PIXEL_NOISE_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHandle {
    pub name: String,
    pub split: Split,
    /// N x C x H x W batch with pixels in [0, 1].
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl DatasetHandle {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Example extents (C, H, W).
    pub fn example_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Materialize the examples at `indices` as one batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let (c, h, w) = self.example_shape();
        let stride = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        let batch = Tensor::new(vec![indices.len(), c, h, w], data).expect("batch shape");
        (batch, labels)
    }

    /// Sequential batches of at most `size` examples.
    pub fn chunks(&self, size: usize) -> Vec<Vec<usize>> {
        (0..self.len())
            .collect::<Vec<_>>()
            .chunks(size)
            .map(|c| c.to_vec())
            .collect()
    }

    /// Take a subset (used for validation splits and truncation).
    pub fn subset(&self, indices: &[usize], split: Split) -> DatasetHandle {
        let (images, labels) = self.batch(indices);
        DatasetHandle {
            name: self.name.clone(),
            split,
            images,
            labels,
            class_names: self.class_names.clone(),
        }
    }
}

/// Parse one buffer of CIFAR-10 binary records (label byte + 3072 pixel bytes
/// as three 1024-byte row-major channel planes).
pub fn parse_cifar10_bytes(bytes: &[u8], name: &str, split: Split) -> Result<DatasetHandle> {
    if bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::DatasetFormat {
            offset: (bytes.len() / CIFAR_RECORD_BYTES * CIFAR_RECORD_BYTES) as u64,
            detail: format!(
                "file length {} is not a multiple of the {}-byte record size",
                bytes.len(),
                CIFAR_RECORD_BYTES
            ),
        });
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * 3072);
    for i in 0..n {
        let base = i * CIFAR_RECORD_BYTES;
        let label = bytes[base];
        if label > 9 {
            return Err(Error::DatasetFormat {
                offset: base as u64,
                detail: format!("label byte {label} out of range 0..=9"),
            });
        }
        labels.push(label as usize);
        data.extend(bytes[base + 1..base + CIFAR_RECORD_BYTES].iter().map(|&b| b as f64 / 255.0));
    }
    Ok(DatasetHandle {
        name: name.to_string(),
        split,
        images: Tensor::new(vec![n, 3, 32, 32], data)?,
        labels,
        class_names: CIFAR_CLASSES.iter().map(|s| s.to_string()).collect(),
    })
}

/// Encode a batch back into the binary record layout (fixture support).
pub fn encode_cifar10_records(images: &Tensor, labels: &[usize]) -> Vec<u8> {
    let n = images.shape()[0];
    let stride = images.numel() / n;
    let mut out = Vec::with_capacity(n * CIFAR_RECORD_BYTES);
    for i in 0..n {
        out.push(labels[i] as u8);
        for &v in &images.data()[i * stride..(i + 1) * stride] {
            out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

/// Load the CIFAR-10 binary batches from a directory.
///
/// Train reads `data_batch_1.bin` .. `data_batch_5.bin` (missing trailing
/// batches are tolerated so subsampled fixtures work); test reads
/// `test_batch.bin`.
pub fn load_cifar10(dir: &Path, split: Split) -> Result<DatasetHandle> {
    let files: Vec<std::path::PathBuf> = match split {
        Split::Test => vec![dir.join("test_batch.bin")],
        _ => (1..=5)
            .map(|i| dir.join(format!("data_batch_{i}.bin")))
            .filter(|p| p.exists())
            .collect(),
    };
    if files.is_empty() || !files[0].exists() {
        return Err(Error::DatasetFormat {
            offset: 0,
            detail: format!("no CIFAR-10 batch files found in {}", dir.display()),
        });
    }
    let mut bytes = Vec::new();
    for f in &files {
        bytes.extend(std::fs::read(f)?);
    }
    parse_cifar10_bytes(&bytes, "cifar10", split)
}

/// Deterministic synthetic dataset with near-perfect Bayes accuracy.
pub fn make_synthetic(
    num_classes: usize,
    samples_per_class: usize,
    resolution: usize,
    seed: u64,
) -> Result<DatasetHandle> {
    if resolution < 4 {
        return Err(Error::InvalidArgument(format!(
            "resolution must be at least 4, got {resolution}"
        )));
    }
    if num_classes == 0 {
        return Err(Error::InvalidArgument("need at least one class".into()));
    }
    if num_classes > resolution {
        return Err(Error::InvalidArgument(format!(
            "at most {resolution} classes supported at this resolution"
        )));
    }
    let mut rng = rng_from_seed(derive_seed(seed, "synthetic"));
    let n = num_classes * samples_per_class;
    let stride = resolution * resolution;
    let mut data = Vec::with_capacity(n * stride);
    let mut labels = Vec::with_capacity(n);
    let gauss = move |rng: &mut rand_chacha::ChaCha8Rng| {
        // Box-Muller from two uniforms.
        let u1: f64 = loop {
            let v = rng.gen::<f64>();
            if v > 0.0 {
                break v;
            }
        };
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    // Interleave classes so any prefix is roughly balanced.
    for i in 0..n {
        let class = i % num_classes;
        labels.push(class);
        // The stripe template carries the true class most of the time; a
        // seeded minority of images wear another class's stripes.
        let stripe_class = if rng.gen::<f64>() < STRIPE_RELIABILITY || num_classes == 1 {
            class
        } else {
            let shift = 1 + rng.gen_range(0..num_classes.max(2) - 1);
            (class + shift) % num_classes
        };
        // Fragile brightness patch in the top quarter of the image: level
        // evenly spaced per class in [-FRAGILE_AMPLITUDE, FRAGILE_AMPLITUDE],
        // perfectly predictive.
        let fragile = if num_classes == 1 {
            0.0
        } else {
            FRAGILE_AMPLITUDE * (2.0 * class as f64 / (num_classes - 1) as f64 - 1.0)
        };
        let patch_rows = (resolution / 4).max(1);
        for row in 0..resolution {
            let stripe = if (row + stripe_class) % 2 == 0 {
                STRIPE_AMPLITUDE
            } else {
                -STRIPE_AMPLITUDE
            };
            let patch = if row < patch_rows { fragile } else { 0.0 };
            for _col in 0..resolution {
                let noise = gauss(&mut rng) * PIXEL_NOISE_STD;
                data.push((0.5 + stripe + patch + noise).clamp(0.0, 1.0));
            }
        }
    }
    Ok(DatasetHandle {
        name: "synthetic".into(),
        split: Split::Train,
        images: Tensor::new(vec![n, 1, resolution, resolution], data)?,
        labels,
        class_names: (0..num_classes).map(|c| format!("class{c}")).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crafted_record_round_trips() {
        // label byte 6, all pixels 255 -> class 6, all-ones image
        let mut record = vec![6u8];
        record.extend(std::iter::repeat(255u8).take(3072));
        let ds = parse_cifar10_bytes(&record, "fixture", Split::Test).unwrap();
        assert_eq!(ds.labels, [6]);
        assert!(ds.images.data().iter().all(|&v| v == 1.0));

        let encoded = encode_cifar10_records(&ds.images, &ds.labels);
        assert_eq!(encoded, record);
    }

    #[test]
    fn truncated_record_rejected_with_offset() {
        let bytes = vec![0u8; 3072];
        let err = parse_cifar10_bytes(&bytes, "fixture", Split::Test).unwrap_err();
        match err {
            Error::DatasetFormat { offset, detail } => {
                assert_eq!(offset, 0);
                assert!(detail.contains("3072"), "{detail}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn out_of_range_label_rejected() {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD_BYTES];
        bytes[CIFAR_RECORD_BYTES] = 10; // second record label
        let err = parse_cifar10_bytes(&bytes, "fixture", Split::Test).unwrap_err();
        match err {
            Error::DatasetFormat { offset, .. } => assert_eq!(offset, CIFAR_RECORD_BYTES as u64),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_bounded() {
        let a = make_synthetic(2, 16, 8, 42).unwrap();
        let b = make_synthetic(2, 16, 8, 42).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
        assert!(a.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let c = make_synthetic(2, 16, 8, 43).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn synthetic_rejects_tiny_resolution() {
        assert!(make_synthetic(2, 4, 3, 0).is_err());
    }

    #[test]
    fn batching_preserves_examples() {
        let ds = make_synthetic(2, 8, 8, 1).unwrap();
        let (batch, labels) = ds.batch(&[3, 0]);
        assert_eq!(batch.shape(), &[2, 1, 8, 8]);
        assert_eq!(labels, [ds.labels[3], ds.labels[0]]);
        let stride = 64;
        assert_eq!(&batch.data()[..stride], &ds.images.data()[3 * stride..4 * stride]);
    }
}
