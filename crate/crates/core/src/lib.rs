//! Desk-scale adversarial-robustness laboratory.
//!
//! The crate trains small convolutional classifiers at a spectrum of
//! L-infinity perturbation strengths, attacks them with PGD and adaptive
//! variants (BPDA, transfer), applies a floor-quantization feature defense,
//! and runs the surrounding analyses: overdesign selection on the robustness
//! grid, filter-norm statistics, pre-activation feature means, and procedural
//! common-corruption evaluation. Everything is deterministic given the config
//! seed.

pub mod analysis;
pub mod attacks;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod pipeline;
pub mod quant;
pub mod records;
pub mod rng;
pub mod tensor;
pub mod train;

pub use attacks::{bpda_pgd, clean_accuracy, pgd, transfer_pgd, AttackConfig, AttackResult};
pub use config::Config;
pub use data::{load_cifar10, make_synthetic, DatasetHandle, Split};
pub use error::{Error, Result};
pub use model::{build, Activation, Arch, Checkpoint, FeatureTransform, Network, TapMap};
pub use pipeline::{run_subcommand, RunContext};
pub use quant::{quantize, QuantTap};
pub use records::{read_records, RecordKind, RecordSink, ResultRecord};
pub use tensor::{Graph, Tensor};
pub use train::{
    adversarial_train, eval_grid, select_overdesign, train_spectrum, RobustnessGrid,
    SelectionMode, TrainConfig,
};
