//! Small convolutional classifiers with named blocks and feature tap points.
//!
//! Two desk-scale architectures are provided. `tiny_cnn` is a plain stack of
//! convolution blocks; `mini_resnet` uses residual blocks whose branch output
//! is added back onto the skip path (so zeroing the branch weights makes the
//! block an exact identity). Both end in global average pooling and a dense
//! head, which makes them resolution-polymorphic.
//!
//! Tap points name the block outputs at which a feature transform (for
//! example floor quantization) may be attached during forward evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::tensor::{Graph, NodeId, Tensor};

/// Channel width of the desk architectures.
const WIDTH: usize = 8;

const CHECKPOINT_MAGIC: &[u8; 4] = b"PSL1";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Swish,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Relu => write!(f, "relu"),
            Activation::Swish => write!(f, "swish"),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "swish" => Ok(Activation::Swish),
            other => Err(Error::InvalidArgument(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    TinyCnn,
    MiniResnet,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arch::TinyCnn => write!(f, "tiny_cnn"),
            Arch::MiniResnet => write!(f, "mini_resnet"),
        }
    }
}

impl FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny_cnn" => Ok(Arch::TinyCnn),
            "mini_resnet" => Ok(Arch::MiniResnet),
            other => Err(Error::UnknownArchitecture(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Conv,
    ResidualConv,
    Dense,
    Pool,
    Activation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub name: String,
    pub kind: BlockKind,
    pub channels_in: usize,
    pub channels_out: usize,
    pub activation: Option<Activation>,
}

/// Feature transform attachable at a tap point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FeatureTransform {
    Identity,
    /// Elementwise floor(beta * x) / beta; identity on the backward pass.
    FloorQuant { beta: f64 },
}

pub type TapMap = BTreeMap<String, FeatureTransform>;

/// Training metadata persisted alongside checkpoint parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainMeta {
    pub epsilon_int: u32,
    pub epoch: usize,
    pub seed: u64,
    /// Criterion used to pick the retained epoch.
    #[serde(default)]
    pub best_checkpoint_criterion: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub arch: Arch,
    pub activation: Activation,
    pub in_channels: usize,
    pub num_classes: usize,
    pub blocks: Vec<BlockSpec>,
    pub params: BTreeMap<String, Tensor>,
    pub tap_points: Vec<String>,
    pub pre_final_activation_tap: String,
}

/// Graph leaf ids for one bound forward/backward pass.
pub struct Binding {
    pub params: BTreeMap<String, NodeId>,
}

pub struct ForwardOut {
    pub logits: NodeId,
    /// Raw (pre-transform) features at every declared tap point.
    pub raw_features: BTreeMap<String, NodeId>,
    /// Feature immediately before the last activation.
    pub pre_final_activation: NodeId,
}

fn he_normal(rng: &mut ChaCha8Rng, fan_in: usize, count: usize) -> Vec<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        // Box-Muller on ChaCha uniforms keeps initialization bit-stable.
        let u1: f64 = loop {
            let v = rng.gen::<f64>();
            if v > 0.0 {
                break v;
            }
        };
        let u2: f64 = rng.gen();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out.push(std * r * theta.cos());
        if out.len() < count {
            out.push(std * r * theta.sin());
        }
    }
    out
}

/// Deterministically build a network from (arch, seed).
pub fn build(
    arch: Arch,
    in_channels: usize,
    num_classes: usize,
    activation: Activation,
    seed: u64,
) -> Result<Network> {
    if num_classes == 0 || in_channels == 0 {
        return Err(Error::InvalidArgument(
            "in_channels and num_classes must be positive".into(),
        ));
    }
    let mut rng = rng_from_seed(seed);
    let mut params = BTreeMap::new();
    let mut init_conv = |params: &mut BTreeMap<String, Tensor>, name: &str, cin: usize, cout: usize| {
        let fan_in = cin * 9;
        let w = he_normal(&mut rng, fan_in, cout * cin * 9);
        params.insert(
            format!("{name}.w"),
            Tensor::new(vec![cout, cin, 3, 3], w).expect("conv init shape"),
        );
        params.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
    };

    let (blocks, tap_points, pre_final) = match arch {
        Arch::TinyCnn => {
            init_conv(&mut params, "conv0", in_channels, WIDTH);
            init_conv(&mut params, "block1", WIDTH, WIDTH);
            init_conv(&mut params, "block2", WIDTH, WIDTH);
            let blocks = vec![
                BlockSpec {
                    name: "conv0".into(),
                    kind: BlockKind::Conv,
                    channels_in: in_channels,
                    channels_out: WIDTH,
                    activation: Some(activation),
                },
                BlockSpec {
                    name: "block1".into(),
                    kind: BlockKind::Conv,
                    channels_in: WIDTH,
                    channels_out: WIDTH,
                    activation: Some(activation),
                },
                BlockSpec {
                    name: "block2".into(),
                    kind: BlockKind::Conv,
                    channels_in: WIDTH,
                    channels_out: WIDTH,
                    activation: Some(activation),
                },
                BlockSpec {
                    name: "pool".into(),
                    kind: BlockKind::Pool,
                    channels_in: WIDTH,
                    channels_out: WIDTH,
                    activation: None,
                },
                BlockSpec {
                    name: "head".into(),
                    kind: BlockKind::Dense,
                    channels_in: WIDTH,
                    channels_out: num_classes,
                    activation: None,
                },
            ];
            let taps = vec!["conv0".to_string(), "block1".to_string(), "block2".to_string()];
            (blocks, taps, "block2_preact".to_string())
        }
        Arch::MiniResnet => {
            init_conv(&mut params, "conv0", in_channels, WIDTH);
            for block in ["block1", "block2"] {
                init_conv(&mut params, &format!("{block}.conv_a"), WIDTH, WIDTH);
                init_conv(&mut params, &format!("{block}.conv_b"), WIDTH, WIDTH);
            }
            let blocks = vec![
                BlockSpec {
                    name: "conv0".into(),
                    kind: BlockKind::Conv,
                    channels_in: in_channels,
                    channels_out: WIDTH,
                    activation: Some(activation),
                },
                BlockSpec {
                    name: "block1".into(),
                    kind: BlockKind::ResidualConv,
                    channels_in: WIDTH,
                    channels_out: WIDTH,
                    activation: Some(activation),
                },
                BlockSpec {
                    name: "block2".into(),
                    kind: BlockKind::ResidualConv,
                    channels_in: WIDTH,
                    channels_out: WIDTH,
                    activation: Some(activation),
                },
                BlockSpec {
                    name: "final_act".into(),
                    kind: BlockKind::Activation,
                    channels_in: WIDTH,
                    channels_out: WIDTH,
                    activation: Some(activation),
                },
                BlockSpec {
                    name: "pool".into(),
                    kind: BlockKind::Pool,
                    channels_in: WIDTH,
                    channels_out: WIDTH,
                    activation: None,
                },
                BlockSpec {
                    name: "head".into(),
                    kind: BlockKind::Dense,
                    channels_in: WIDTH,
                    channels_out: num_classes,
                    activation: None,
                },
            ];
            let taps = vec!["conv0".to_string(), "block1".to_string(), "block2".to_string()];
            (blocks, taps, "block2".to_string())
        }
    };

    // Dense head, initialized after conv stacks so parameter draws are in
    // declaration order.
    let w = he_normal(&mut rng, WIDTH, num_classes * WIDTH);
    params.insert(
        "head.w".into(),
        Tensor::new(vec![num_classes, WIDTH], w).expect("head init shape"),
    );
    params.insert("head.b".into(), Tensor::zeros(&[num_classes]));

    Ok(Network {
        arch,
        activation,
        in_channels,
        num_classes,
        blocks,
        params,
        tap_points,
        pre_final_activation_tap: pre_final,
    })
}

impl Network {
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Binding {
        let params = self
            .params
            .iter()
            .map(|(name, t)| (name.clone(), g.leaf(t.clone(), trainable)))
            .collect();
        Binding { params }
    }

    fn act(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        match self.activation {
            Activation::Relu => g.relu(x),
            Activation::Swish => g.swish(x),
        }
    }

    fn apply_tap(
        g: &mut Graph,
        taps: &TapMap,
        name: &str,
        raw: NodeId,
    ) -> Result<NodeId> {
        match taps.get(name) {
            None | Some(FeatureTransform::Identity) => Ok(raw),
            Some(FeatureTransform::FloorQuant { beta }) => g.floor_scale(raw, *beta),
        }
    }

    /// Forward pass over graph node ids. Tap transforms are applied to block
    /// outputs before being fed forward; the raw features are reported.
    pub fn forward_bound(
        &self,
        g: &mut Graph,
        binding: &Binding,
        input: NodeId,
        taps: &TapMap,
    ) -> Result<ForwardOut> {
        for key in taps.keys() {
            if !self.tap_points.contains(key) {
                return Err(Error::UnknownTapPoint(key.clone()));
            }
        }
        let p = |name: &str| -> NodeId { binding.params[name] };
        let mut raw_features = BTreeMap::new();

        let (mut cur, pre_final) = match self.arch {
            Arch::TinyCnn => {
                let mut cur = input;
                let mut pre_final = None;
                for name in ["conv0", "block1", "block2"] {
                    let conv = g.conv2d(cur, p(&format!("{name}.w")), p(&format!("{name}.b")))?;
                    if name == "block2" {
                        pre_final = Some(conv);
                    }
                    let out = self.act(g, conv)?;
                    raw_features.insert(name.to_string(), out);
                    cur = Self::apply_tap(g, taps, name, out)?;
                }
                (cur, pre_final.expect("block2 visited"))
            }
            Arch::MiniResnet => {
                let conv = g.conv2d(input, p("conv0.w"), p("conv0.b"))?;
                let out = self.act(g, conv)?;
                raw_features.insert("conv0".to_string(), out);
                let mut cur = Self::apply_tap(g, taps, "conv0", out)?;
                for name in ["block1", "block2"] {
                    let a = g.conv2d(cur, p(&format!("{name}.conv_a.w")), p(&format!("{name}.conv_a.b")))?;
                    let a = self.act(g, a)?;
                    let b = g.conv2d(a, p(&format!("{name}.conv_b.w")), p(&format!("{name}.conv_b.b")))?;
                    let out = g.add(cur, b)?;
                    raw_features.insert(name.to_string(), out);
                    cur = Self::apply_tap(g, taps, name, out)?;
                }
                let pre_final = cur;
                cur = self.act(g, cur)?;
                (cur, pre_final)
            }
        };

        cur = g.global_avg_pool(cur)?;
        let logits = g.dense(cur, p("head.w"), p("head.b"))?;
        Ok(ForwardOut { logits, raw_features, pre_final_activation: pre_final })
    }

    /// Evaluation-mode forward: returns logits and the raw tapped features.
    pub fn forward(
        &self,
        batch: &Tensor,
        taps: &TapMap,
    ) -> Result<(Tensor, BTreeMap<String, Tensor>)> {
        let mut g = Graph::new();
        let input = g.leaf(batch.clone(), false);
        let binding = self.bind(&mut g, false);
        let out = self.forward_bound(&mut g, &binding, input, taps)?;
        let logits = g.value(out.logits).clone();
        let mut features: BTreeMap<String, Tensor> = out
            .raw_features
            .iter()
            .map(|(k, &id)| (k.clone(), g.value(id).clone()))
            .collect();
        features.insert(
            self.pre_final_activation_tap.clone(),
            g.value(out.pre_final_activation).clone(),
        );
        Ok((logits, features))
    }

    pub fn logits(&self, batch: &Tensor, taps: &TapMap) -> Result<Tensor> {
        Ok(self.forward(batch, taps)?.0)
    }

    /// Argmax predictions (ties resolve to the lowest class index).
    pub fn predict(&self, batch: &Tensor, taps: &TapMap) -> Result<Vec<usize>> {
        let logits = self.logits(batch, taps)?;
        Ok(argmax_rows(&logits))
    }
}

/// Row-wise argmax of an NxK tensor.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    (0..n)
        .map(|i| {
            let row = &logits.data()[i * k..(i + 1) * k];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    arch: Arch,
    activation: Activation,
    in_channels: usize,
    num_classes: usize,
    blocks: Vec<BlockSpec>,
    tap_points: Vec<String>,
    pre_final_activation_tap: String,
    metadata: TrainMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub meta: TrainMeta,
}

impl Checkpoint {
    pub fn new(network: Network, meta: TrainMeta) -> Self {
        Checkpoint { network, meta }
    }

    /// Serialize: magic, u32 header length, JSON header, then little-endian
    /// f64 payloads in header directory order. Round trips bitwise.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        let mut offset = 0u64;
        for (name, t) in &self.network.params {
            let len = t.numel() as u64;
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len,
            });
            offset += len * 8;
        }
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            arch: self.network.arch,
            activation: self.network.activation,
            in_channels: self.network.in_channels,
            num_classes: self.network.num_classes,
            blocks: self.network.blocks.clone(),
            tap_points: self.network.tap_points.clone(),
            pre_final_activation_tap: self.network.pre_final_activation_tap.clone(),
            metadata: self.meta.clone(),
            tensors,
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let mut file = std::fs::File::create(path)?;
        file.write_all(CHECKPOINT_MAGIC)?;
        file.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
        file.write_all(&header_bytes)?;
        for t in self.network.params.values() {
            for &v in t.data() {
                file.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let fail = |offset: u64, detail: &str| Error::CheckpointFormat {
            offset,
            detail: detail.to_string(),
        };
        if bytes.len() < 8 {
            return Err(fail(bytes.len() as u64, "file shorter than magic + header length"));
        }
        if &bytes[0..4] != CHECKPOINT_MAGIC {
            return Err(fail(0, "bad magic, expected PSL1"));
        }
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if bytes.len() < 8 + header_len {
            return Err(fail(bytes.len() as u64, "truncated header"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&bytes[8..8 + header_len])?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: header.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        // Rebuild the topology from the header, then overwrite parameters.
        let mut network = build(
            header.arch,
            header.in_channels,
            header.num_classes,
            header.activation,
            header.metadata.seed,
        )?;
        if network.blocks != header.blocks {
            return Err(Error::TopologyMismatch(format!(
                "header blocks do not match a freshly built {}",
                header.arch
            )));
        }
        network.tap_points = header.tap_points;
        network.pre_final_activation_tap = header.pre_final_activation_tap;

        let payload_start = 8 + header_len;
        let payload = &bytes[payload_start..];
        let mut seen = std::collections::BTreeSet::new();
        for entry in &header.tensors {
            let Some(existing) = network.params.get(&entry.name) else {
                return Err(Error::TopologyMismatch(format!("unexpected tensor `{}`", entry.name)));
            };
            if existing.shape() != entry.shape.as_slice() {
                return Err(Error::TopologyMismatch(format!(
                    "tensor `{}` shape {:?} does not match topology {:?}",
                    entry.name,
                    entry.shape,
                    existing.shape()
                )));
            }
            let start = entry.offset as usize;
            let byte_len = (entry.len as usize) * 8;
            if start + byte_len > payload.len() {
                return Err(fail(
                    (payload_start + payload.len()) as u64,
                    &format!(
                        "truncated payload: tensor `{}` needs bytes {}..{} of payload",
                        entry.name,
                        start,
                        start + byte_len
                    ),
                ));
            }
            let data: Vec<f64> = payload[start..start + byte_len]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            network
                .params
                .insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
            seen.insert(entry.name.clone());
        }
        if seen.len() != network.params.len() {
            let missing: Vec<&String> = network
                .params
                .keys()
                .filter(|k| !seen.contains(*k))
                .collect();
            return Err(Error::TopologyMismatch(format!("missing tensors {missing:?}")));
        }
        Ok(Checkpoint { network, meta: header.metadata })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_batch(n: usize, c: usize, hw: usize, seed: u64) -> Tensor {
        let mut rng = rng_from_seed(seed);
        let data = (0..n * c * hw * hw).map(|_| rng.gen::<f64>()).collect();
        Tensor::new(vec![n, c, hw, hw], data).unwrap()
    }

    #[test]
    fn build_is_deterministic() {
        let a = build(Arch::TinyCnn, 1, 2, Activation::Relu, 42).unwrap();
        let b = build(Arch::TinyCnn, 1, 2, Activation::Relu, 42).unwrap();
        assert_eq!(a.params, b.params);
        let c = build(Arch::TinyCnn, 1, 2, Activation::Relu, 43).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn tiny_cnn_tap_points() {
        let net = build(Arch::TinyCnn, 1, 2, Activation::Relu, 0).unwrap();
        assert_eq!(net.tap_points, ["conv0", "block1", "block2"]);
    }

    #[test]
    fn identity_taps_match_no_taps_bitwise() {
        for arch in [Arch::TinyCnn, Arch::MiniResnet] {
            let net = build(arch, 1, 3, Activation::Swish, 7).unwrap();
            let batch = small_batch(2, 1, 8, 11);
            let plain = net.logits(&batch, &TapMap::new()).unwrap();
            let mut taps = TapMap::new();
            for t in &net.tap_points {
                taps.insert(t.clone(), FeatureTransform::Identity);
            }
            let tapped = net.logits(&batch, &taps).unwrap();
            assert_eq!(plain, tapped);
        }
    }

    #[test]
    fn quant_tap_changes_downstream_features() {
        let net = build(Arch::TinyCnn, 1, 2, Activation::Relu, 3).unwrap();
        let batch = small_batch(1, 1, 8, 5);
        let mut taps = TapMap::new();
        taps.insert("conv0".into(), FeatureTransform::FloorQuant { beta: 8.0 });
        let (quant_logits, raw) = net.forward(&batch, &taps).unwrap();
        let (plain_logits, raw_plain) = net.forward(&batch, &TapMap::new()).unwrap();
        // Raw features are pre-transform, identical either way.
        assert_eq!(raw["conv0"], raw_plain["conv0"]);
        assert_ne!(quant_logits, plain_logits);
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let mut net = build(Arch::TinyCnn, 1, 4, Activation::Relu, 1).unwrap();
        net.params.insert("head.w".into(), Tensor::zeros(&[4, WIDTH]));
        net.params.insert("head.b".into(), Tensor::zeros(&[4]));
        let logits = net.logits(&small_batch(3, 1, 8, 2), &TapMap::new()).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zeroed_residual_branch_is_identity() {
        let mut net = build(Arch::MiniResnet, 1, 2, Activation::Relu, 9).unwrap();
        for name in ["block1", "block2"] {
            for part in ["conv_a", "conv_b"] {
                let key_w = format!("{name}.{part}.w");
                let key_b = format!("{name}.{part}.b");
                let shape_w = net.params[&key_w].shape().to_vec();
                let shape_b = net.params[&key_b].shape().to_vec();
                net.params.insert(key_w, Tensor::zeros(&shape_w));
                net.params.insert(key_b, Tensor::zeros(&shape_b));
            }
        }
        let batch = small_batch(1, 1, 8, 4);
        let (_, features) = net.forward(&batch, &TapMap::new()).unwrap();
        // With zero branches both residual blocks pass conv0's feature through.
        assert_eq!(features["block1"], features["conv0"]);
        assert_eq!(features["block2"], features["conv0"]);
    }

    #[test]
    fn pre_final_activation_feeds_dense_head() {
        let net = build(Arch::TinyCnn, 1, 2, Activation::Relu, 6).unwrap();
        let batch = small_batch(1, 1, 8, 8);
        let (_, features) = net.forward(&batch, &TapMap::new()).unwrap();
        let pre = &features["block2_preact"];
        let post = &features["block2"];
        for (a, b) in pre.data().iter().zip(post.data()) {
            assert_eq!(a.max(0.0), *b);
        }
    }

    #[test]
    fn unknown_tap_rejected() {
        let net = build(Arch::TinyCnn, 1, 2, Activation::Relu, 0).unwrap();
        let mut taps = TapMap::new();
        taps.insert("layer9".into(), FeatureTransform::Identity);
        let err = net.logits(&small_batch(1, 1, 8, 0), &taps).unwrap_err();
        assert!(matches!(err, Error::UnknownTapPoint(_)));
    }

    #[test]
    fn checkpoint_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.psl");
        let net = build(Arch::MiniResnet, 3, 10, Activation::Swish, 123).unwrap();
        let meta = TrainMeta {
            epsilon_int: 8,
            epoch: 14,
            seed: 123,
            best_checkpoint_criterion: "robust_val_err".into(),
        };
        Checkpoint::new(net.clone(), meta.clone()).save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.network.params, net.params);
        assert_eq!(loaded.meta, meta);
        assert_eq!(loaded.meta.epsilon_int, 8);
    }

    #[test]
    fn truncated_checkpoint_rejected_with_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.psl");
        let net = build(Arch::TinyCnn, 1, 2, Activation::Relu, 5).unwrap();
        Checkpoint::new(net, TrainMeta::default()).save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = &bytes[..bytes.len() - 16];
        let err = Checkpoint::from_bytes(cut).unwrap_err();
        match err {
            Error::CheckpointFormat { offset, .. } => assert!(offset > 0),
            other => panic!("expected format error, got {other}"),
        }
    }

    #[test]
    fn corrupt_magic_rejected() {
        let err = Checkpoint::from_bytes(b"NOPE00000000").unwrap_err();
        assert!(matches!(err, Error::CheckpointFormat { offset: 0, .. }));
    }
}
