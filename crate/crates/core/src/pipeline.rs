//! The experiment pipeline behind each CLI subcommand.
//!
//! Every subcommand is an ordinary function over a [`RunContext`], so
//! integration tests drive the exact code path the binary does. Each appends
//! result records to `records.jsonl` in the run directory and returns a short
//! human-readable summary. Reports are pure functions of the record store.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::analysis::{
    corrupt, corruption_eval, filter_norms, preact_mean, CorruptionKind, CorruptionSpec,
};
use crate::attacks::{bpda_pgd, clean_accuracy, transfer_pgd, AttackConfig};
use crate::config::Config;
use crate::data::{load_cifar10, make_synthetic, DatasetHandle, Split};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, FeatureTransform, TapMap};
use crate::records::{read_records, RecordKind, RecordSink, ResultRecord};
use crate::rng::derive_seed;
use crate::train::{
    eval_grid, select_overdesign, train_spectrum, RobustnessGrid, SelectionMode, TrainConfig,
};

pub struct RunContext {
    pub cfg: Config,
    pub out: PathBuf,
    pub fingerprint: String,
}

impl RunContext {
    pub fn new(cfg: Config, out: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let out = out.into();
        std::fs::create_dir_all(&out)?;
        let fingerprint = cfg.fingerprint();
        // Persist the resolved config next to the results for traceability.
        std::fs::write(out.join("resolved_config.toml"), cfg.resolved())?;
        Ok(RunContext { cfg, out, fingerprint })
    }

    fn records_path(&self) -> PathBuf {
        self.out.join("records.jsonl")
    }

    fn sink(&self) -> Result<RecordSink> {
        RecordSink::open(&self.records_path())
    }

    fn record(&self, kind: RecordKind, producer: &str) -> ResultRecord {
        ResultRecord::new(kind, producer, &self.fingerprint, self.cfg.run.seed)
    }

    pub fn train_data(&self) -> Result<DatasetHandle> {
        self.dataset(Split::Train)
    }

    pub fn test_data(&self) -> Result<DatasetHandle> {
        self.dataset(Split::Test)
    }

    fn dataset(&self, split: Split) -> Result<DatasetHandle> {
        let d = &self.cfg.dataset;
        match d.kind.as_str() {
            "synthetic" => {
                let (per_class, key) = match split {
                    Split::Test => (d.test_samples_per_class, "data/test"),
                    _ => (d.train_samples_per_class, "data/train"),
                };
                let mut ds = make_synthetic(
                    d.num_classes,
                    per_class,
                    d.resolution,
                    derive_seed(self.cfg.run.seed, key),
                )?;
                ds.split = split;
                Ok(ds)
            }
            "cifar10" => load_cifar10(Path::new(&d.path), split),
            other => Err(Error::Config(format!("unknown dataset kind {other}"))),
        }
    }

    fn base_train_config(&self) -> TrainConfig {
        let t = &self.cfg.train;
        let mut pgd = AttackConfig::new(0, t.inner_steps, self.cfg.run.seed);
        pgd.random_start = true;
        TrainConfig {
            epsilon_int: 0,
            epochs: t.epochs,
            batch_size: t.batch_size,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            lr: t.lr,
            lr_decay_epochs: t.lr_decay_epochs.clone(),
            lr_decay_factor: t.lr_decay_factor,
            pgd,
            seed: self.cfg.run.seed,
        }
    }

    fn checkpoint_path(&self, epsilon: u32) -> PathBuf {
        self.out.join(format!("eps_{epsilon}.ckpt"))
    }

    /// Load the spectrum checkpoints, training any that are missing.
    pub fn ensure_checkpoints(&self) -> Result<Vec<Checkpoint>> {
        let missing: Vec<u32> = self
            .cfg
            .train
            .epsilons
            .iter()
            .copied()
            .filter(|&e| !self.checkpoint_path(e).exists())
            .collect();
        if !missing.is_empty() {
            self.train_and_save()?;
        }
        self.cfg
            .train
            .epsilons
            .iter()
            .map(|&e| Checkpoint::load(&self.checkpoint_path(e)))
            .collect()
    }

    fn train_and_save(&self) -> Result<Vec<Checkpoint>> {
        let data = self.train_data()?;
        let trained = train_spectrum(
            self.cfg.model.arch,
            self.cfg.model.activation,
            &self.cfg.train.epsilons,
            &self.base_train_config(),
            &data,
        )?;
        let mut out = Vec::with_capacity(trained.len());
        for (ckpt, _) in trained {
            ckpt.save(&self.checkpoint_path(ckpt.meta.epsilon_int))?;
            out.push(ckpt);
        }
        Ok(out)
    }
}

/// `train-spectrum`: train one model per epsilon, save checkpoints, record
/// each model's clean test accuracy.
pub fn cmd_train_spectrum(ctx: &RunContext) -> Result<String> {
    let checkpoints = ctx.train_and_save()?;
    let test = ctx.test_data()?;
    let mut sink = ctx.sink()?;
    let mut lines = Vec::new();
    for ckpt in &checkpoints {
        let mut correct = 0usize;
        for chunk in test.chunks(ctx.cfg.train.batch_size) {
            let (batch, labels) = test.batch(&chunk);
            let acc = clean_accuracy(&ckpt.network, &TapMap::new(), &batch, &labels)?;
            correct += (acc / 100.0 * labels.len() as f64).round() as usize;
        }
        let acc = 100.0 * correct as f64 / test.len() as f64;
        sink.append(
            &ctx.record(RecordKind::CleanAcc, "train-spectrum")
                .label("model_eps", ckpt.meta.epsilon_int)
                .label("best_epoch", ckpt.meta.epoch)
                .value("accuracy", acc),
        )?;
        lines.push(format!(
            "eps={:<2} clean_acc={:.2} best_epoch={}",
            ckpt.meta.epsilon_int, acc, ckpt.meta.epoch
        ));
    }
    Ok(lines.join("\n"))
}

fn compute_grid(ctx: &RunContext, checkpoints: &[Checkpoint]) -> Result<RobustnessGrid> {
    let test = ctx.test_data()?;
    let seed = derive_seed(ctx.cfg.run.seed, "eval_grid");
    if ctx.cfg.run.jobs > 1 {
        // One task per model row; rows collect in checkpoint order, so the
        // reduction is order-stable.
        let rows: Result<Vec<RobustnessGrid>> = checkpoints
            .par_iter()
            .map(|c| {
                eval_grid(
                    std::slice::from_ref(c),
                    &ctx.cfg.attack.deltas,
                    ctx.cfg.attack.steps,
                    &test,
                    ctx.cfg.train.batch_size,
                    seed,
                )
            })
            .collect();
        let rows = rows?;
        Ok(RobustnessGrid {
            model_epsilons: rows.iter().map(|r| r.model_epsilons[0]).collect(),
            attack_deltas: ctx.cfg.attack.deltas.clone(),
            errors: rows.iter().map(|r| r.errors[0].clone()).collect(),
            clean_errors: rows.iter().map(|r| r.clean_errors[0]).collect(),
        })
    } else {
        eval_grid(
            checkpoints,
            &ctx.cfg.attack.deltas,
            ctx.cfg.attack.steps,
            &test,
            ctx.cfg.train.batch_size,
            seed,
        )
    }
}

/// `eval-grid`: robust-error grid over (model epsilon x attack delta),
/// overdesign selections, and the error-vs-epsilon curve CSV.
pub fn cmd_eval_grid(ctx: &RunContext) -> Result<String> {
    let checkpoints = ctx.ensure_checkpoints()?;
    let grid = compute_grid(ctx, &checkpoints)?;
    let mut sink = ctx.sink()?;
    for (i, &eps) in grid.model_epsilons.iter().enumerate() {
        for (j, &delta) in grid.attack_deltas.iter().enumerate() {
            sink.append(
                &ctx.record(RecordKind::RobustErr, "eval-grid")
                    .label("model_eps", eps)
                    .label("delta", delta)
                    .value("error", grid.errors[i][j]),
            )?;
        }
    }
    std::fs::write(ctx.out.join("grid.json"), serde_json::to_string_pretty(&grid)?)?;
    std::fs::write(ctx.out.join("error_vs_epsilon.csv"), grid_curves_csv(&grid))?;

    let mut selections = Vec::new();
    for &delta in &grid.attack_deltas {
        if delta == 0 {
            continue;
        }
        for mode in [SelectionMode::GridArgmin, SelectionMode::EarlyStop] {
            if let Ok(choice) = select_overdesign(&grid, delta, mode) {
                selections.push(choice);
            }
        }
    }
    std::fs::write(
        ctx.out.join("overdesign.json"),
        serde_json::to_string_pretty(&selections)?,
    )?;

    let mut lines = vec![format!(
        "grid: {} models x {} deltas",
        grid.model_epsilons.len(),
        grid.attack_deltas.len()
    )];
    for s in &selections {
        lines.push(format!(
            "delta={} mode={:?} eps*={}",
            s.delta, s.selection_mode, s.epsilon_star
        ));
    }
    Ok(lines.join("\n"))
}

/// Long-format CSV of the grid: one row per (delta, epsilon) pair, giving the
/// per-delta curve of robust error as a function of the training epsilon.
pub fn grid_curves_csv(grid: &RobustnessGrid) -> String {
    let mut out = String::from("delta,model_eps,robust_err\n");
    for (j, &delta) in grid.attack_deltas.iter().enumerate() {
        for (i, &eps) in grid.model_epsilons.iter().enumerate() {
            out.push_str(&format!("{delta},{eps},{}\n", grid.errors[i][j]));
        }
    }
    out
}

/// `quant-sweep`: defended accuracy over taps x beta x delta x attack kind,
/// with the undefended ("none") baseline row.
pub fn cmd_quant_sweep(ctx: &RunContext) -> Result<String> {
    let checkpoints = ctx.ensure_checkpoints()?;
    let host = checkpoints
        .iter()
        .find(|c| c.meta.epsilon_int == ctx.cfg.quant.model_epsilon)
        .ok_or_else(|| Error::Config("quant.model_epsilon has no checkpoint".into()))?;
    for tap in &ctx.cfg.quant.taps {
        if !host.network.tap_points.contains(tap) {
            return Err(Error::UnknownTapPoint(tap.clone()));
        }
    }
    let test = ctx.test_data()?;
    let mut sink = ctx.sink()?;
    let mut cells = 0usize;

    let mut taps_to_sweep: Vec<Option<String>> = vec![None];
    taps_to_sweep.extend(ctx.cfg.quant.taps.iter().cloned().map(Some));

    for tap in &taps_to_sweep {
        for &beta in &ctx.cfg.quant.betas {
            let tap_map: TapMap = match tap {
                None => TapMap::new(),
                Some(t) => {
                    let mut m = TapMap::new();
                    m.insert(t.clone(), FeatureTransform::FloorQuant { beta });
                    m
                }
            };
            let tap_label = tap.clone().unwrap_or_else(|| "none".into());
            for &delta in &ctx.cfg.quant.deltas {
                for attack in ["bpda", "transfer"] {
                    let mut correct = 0usize;
                    for (b, chunk) in test.chunks(ctx.cfg.train.batch_size).iter().enumerate() {
                        let (batch, labels) = test.batch(chunk);
                        if delta == 0 {
                            let acc =
                                clean_accuracy(&host.network, &tap_map, &batch, &labels)?;
                            correct += (acc / 100.0 * labels.len() as f64).round() as usize;
                        } else {
                            let cfg = AttackConfig::new(
                                delta,
                                ctx.cfg.attack.steps,
                                derive_seed(
                                    ctx.cfg.run.seed,
                                    &format!("quant/{tap_label}/{beta}/{delta}/{attack}/{b}"),
                                ),
                            );
                            let result = match attack {
                                "bpda" => {
                                    bpda_pgd(&host.network, &tap_map, &batch, &labels, &cfg)?
                                }
                                _ => transfer_pgd(&host.network, &tap_map, &batch, &labels, &cfg)?,
                            };
                            correct += result.success_mask.iter().filter(|&&s| !s).count();
                        }
                    }
                    let acc = 100.0 * correct as f64 / test.len() as f64;
                    sink.append(
                        &ctx.record(RecordKind::QuantAcc, "quant-sweep")
                            .label("model_eps", ctx.cfg.quant.model_epsilon)
                            .label("tap", &tap_label)
                            .label("beta", beta)
                            .label("delta", delta)
                            .label("attack", attack)
                            .value("accuracy", acc),
                    )?;
                    cells += 1;
                }
            }
        }
    }
    Ok(format!("quant sweep: {cells} cells recorded"))
}

/// `filter-norms`: per-checkpoint filter-norm statistics and CSV export.
pub fn cmd_filter_norms(ctx: &RunContext) -> Result<String> {
    let checkpoints = ctx.ensure_checkpoints()?;
    let mut sink = ctx.sink()?;
    let mut lines = Vec::new();
    for ckpt in &checkpoints {
        let report = filter_norms(&ckpt.network)?;
        let eps = ckpt.meta.epsilon_int;
        std::fs::write(ctx.out.join(format!("filter_norms_eps_{eps}.csv")), report.to_csv())?;
        for layer in &report.layers {
            sink.append(
                &ctx.record(RecordKind::FilterNorms, "filter-norms")
                    .label("model_eps", eps)
                    .label("layer", &layer.layer)
                    .value("mean_linf", layer.mean_linf)
                    .value("max_linf", layer.max_linf),
            )?;
            lines.push(format!(
                "eps={eps} {} mean={:.4} max={:.4}",
                layer.layer, layer.mean_linf, layer.max_linf
            ));
        }
    }
    Ok(lines.join("\n"))
}

/// `preact-stats`: mean of the final pre-activation features per checkpoint.
pub fn cmd_preact_stats(ctx: &RunContext) -> Result<String> {
    let checkpoints = ctx.ensure_checkpoints()?;
    let test = ctx.test_data()?;
    let mut sink = ctx.sink()?;
    let mut lines = Vec::new();
    for ckpt in &checkpoints {
        let tap = ckpt.network.pre_final_activation_tap.clone();
        let stats = preact_mean(&ckpt.network, &test, &tap, ctx.cfg.train.batch_size)?;
        sink.append(
            &ctx.record(RecordKind::PreactMean, "preact-stats")
                .label("model_eps", ckpt.meta.epsilon_int)
                .label("tap", &stats.tap)
                .value("mean", stats.mean),
        )?;
        lines.push(format!("eps={} tap={} mean={:.6}", ckpt.meta.epsilon_int, stats.tap, stats.mean));
    }
    Ok(lines.join("\n"))
}

fn corruption_specs(ctx: &RunContext) -> Result<Vec<CorruptionSpec>> {
    let mut specs = Vec::new();
    for kind_name in &ctx.cfg.corruption.kinds {
        let kind = CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == kind_name)
            .ok_or_else(|| Error::Config(format!("unknown corruption kind {kind_name}")))?;
        for &severity in &ctx.cfg.corruption.severities {
            specs.push(CorruptionSpec::new(
                kind,
                severity,
                derive_seed(ctx.cfg.run.seed, &format!("corrupt/{kind_name}/{severity}")),
            )?);
        }
    }
    Ok(specs)
}

/// `corrupt-eval`: per-(model, corruption) accuracy table and per-model
/// averages.
pub fn cmd_corrupt_eval(ctx: &RunContext) -> Result<String> {
    let checkpoints = ctx.ensure_checkpoints()?;
    let specs = corruption_specs(ctx)?;
    let test = ctx.test_data()?;
    let table = corruption_eval(&checkpoints, &specs, &test, ctx.cfg.train.batch_size)?;
    let mut sink = ctx.sink()?;
    for cell in &table.cells {
        sink.append(
            &ctx.record(RecordKind::CorruptionAcc, "corrupt-eval")
                .label("model_eps", cell.model_epsilon)
                .label("corruption", cell.kind.name())
                .label("severity", cell.severity)
                .value("accuracy", cell.accuracy),
        )?;
    }
    let mut lines = Vec::new();
    for (eps, avg) in &table.per_model_average {
        sink.append(
            &ctx.record(RecordKind::CorruptionAcc, "corrupt-eval")
                .label("model_eps", *eps)
                .label("corruption", "average")
                .value("accuracy", *avg),
        )?;
        lines.push(format!("eps={eps} avg_corruption_acc={avg:.2}"));
    }
    Ok(lines.join("\n"))
}

/// `report`: pure function of the record store. Emits the quantization table
/// with a signed delta column against the undefended baseline, and the
/// error-vs-epsilon curves as CSV.
pub fn cmd_report(ctx: &RunContext) -> Result<String> {
    let records = read_records(&ctx.records_path())?;
    let mut report = String::new();

    // Quantization table: rows = tap, columns = (beta, delta, attack), value
    // and signed delta versus the "none" row of the same column.
    let quant: Vec<&ResultRecord> =
        records.iter().filter(|r| r.kind == RecordKind::QuantAcc).collect();
    if !quant.is_empty() {
        let mut baseline: BTreeMap<(String, String, String), f64> = BTreeMap::new();
        for r in &quant {
            if r.labels["tap"] == "none" {
                let key = (
                    r.labels["beta"].clone(),
                    r.labels["delta"].clone(),
                    r.labels["attack"].clone(),
                );
                baseline.insert(key, r.values["accuracy"]);
            }
        }
        report.push_str("# quantization sweep (accuracy, signed delta vs no defense)\n");
        report.push_str("tap,beta,delta,attack,accuracy,delta_vs_none\n");
        for r in &quant {
            let key = (
                r.labels["beta"].clone(),
                r.labels["delta"].clone(),
                r.labels["attack"].clone(),
            );
            let base = baseline.get(&key).copied().unwrap_or(f64::NAN);
            let acc = r.values["accuracy"];
            report.push_str(&format!(
                "{},{},{},{},{:.4},{:+.4}\n",
                r.labels["tap"], key.0, key.1, key.2, acc, acc - base
            ));
        }
        report.push('\n');
    }

    // Per-delta robust-error curves from eval-grid records.
    let robust: Vec<&ResultRecord> =
        records.iter().filter(|r| r.kind == RecordKind::RobustErr).collect();
    if !robust.is_empty() {
        report.push_str("# robust error by model epsilon and attack delta\n");
        report.push_str("delta,model_eps,robust_err\n");
        let mut rows: Vec<(u32, u32, f64)> = robust
            .iter()
            .map(|r| {
                (
                    r.labels["delta"].parse().unwrap_or(0),
                    r.labels["model_eps"].parse().unwrap_or(0),
                    r.values["error"],
                )
            })
            .collect();
        rows.sort_by_key(|&(d, e, _)| (d, e));
        rows.dedup_by_key(|&mut (d, e, _)| (d, e));
        for (d, e, v) in rows {
            report.push_str(&format!("{d},{e},{v}\n"));
        }
        report.push('\n');
    }

    if report.is_empty() {
        report.push_str("no records found; run the other subcommands first\n");
    }
    std::fs::write(ctx.out.join("report.csv"), &report)?;
    Ok(report)
}

/// Dispatch a subcommand by its CLI name.
pub fn run_subcommand(name: &str, ctx: &RunContext) -> Result<String> {
    match name {
        "train-spectrum" => cmd_train_spectrum(ctx),
        "eval-grid" => cmd_eval_grid(ctx),
        "quant-sweep" => cmd_quant_sweep(ctx),
        "filter-norms" => cmd_filter_norms(ctx),
        "preact-stats" => cmd_preact_stats(ctx),
        "corrupt-eval" => cmd_corrupt_eval(ctx),
        "report" => cmd_report(ctx),
        other => Err(Error::InvalidArgument(format!("unknown subcommand {other}"))),
    }
}

/// Corruption smoke check used by tests: severity-0 spec on an arbitrary kind
/// returns the batch unchanged.
pub fn identity_corruption_is_noop(batch: &crate::tensor::Tensor) -> Result<bool> {
    let spec = CorruptionSpec::new(CorruptionKind::Brightness, 0, 0)?;
    Ok(&corrupt(batch, &spec)? == batch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> Config {
        let mut cfg = Config::default();
        cfg.dataset.train_samples_per_class = 12;
        cfg.dataset.test_samples_per_class = 8;
        cfg.train.epsilons = vec![0, 2];
        cfg.train.epochs = 2;
        cfg.train.batch_size = 8;
        cfg.train.inner_steps = 2;
        cfg.attack.deltas = vec![0, 2];
        cfg.attack.steps = 3;
        cfg.quant.model_epsilon = 2;
        cfg.quant.betas = vec![8.0];
        cfg.quant.taps = vec!["conv0".into()];
        cfg.quant.deltas = vec![0, 2];
        cfg.corruption.severities = vec![0, 2];
        cfg.corruption.kinds = vec!["brightness".into(), "pixelate".into()];
        cfg.run.seed = 11;
        cfg
    }

    #[test]
    fn full_pipeline_smoke_and_rerun_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let ctx = RunContext::new(tiny_config(), dir.path().join("run")).unwrap();
        for sub in [
            "train-spectrum",
            "eval-grid",
            "quant-sweep",
            "filter-norms",
            "preact-stats",
            "corrupt-eval",
            "report",
        ] {
            run_subcommand(sub, &ctx).unwrap();
        }
        let first = read_records(&ctx.records_path()).unwrap();
        assert!(!first.is_empty());
        assert!(ctx.out.join("error_vs_epsilon.csv").exists());
        assert!(ctx.out.join("overdesign.json").exists());
        assert!(ctx.out.join("report.csv").exists());

        // Rerun in a fresh directory: identical records (fingerprint and
        // values), bitwise.
        let ctx2 = RunContext::new(tiny_config(), dir.path().join("run2")).unwrap();
        for sub in [
            "train-spectrum",
            "eval-grid",
            "quant-sweep",
            "filter-norms",
            "preact-stats",
            "corrupt-eval",
        ] {
            run_subcommand(sub, &ctx2).unwrap();
        }
        let second = read_records(&ctx2.records_path()).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn parallel_grid_matches_serial_within_tolerance() {
        let dir = tempfile::tempdir().unwrap();
        let ctx = RunContext::new(tiny_config(), dir.path().join("serial")).unwrap();
        let checkpoints = ctx.ensure_checkpoints().unwrap();
        let serial = compute_grid(&ctx, &checkpoints).unwrap();
        let mut par_cfg = tiny_config();
        par_cfg.run.jobs = 2;
        let ctx_par = RunContext::new(par_cfg, dir.path().join("par")).unwrap();
        let par = compute_grid(&ctx_par, &checkpoints).unwrap();
        assert_eq!(serial.model_epsilons, par.model_epsilons);
        for (a, b) in serial.errors.iter().flatten().zip(par.errors.iter().flatten()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn report_quant_table_has_signed_delta_column() {
        let dir = tempfile::tempdir().unwrap();
        let ctx = RunContext::new(tiny_config(), dir.path().join("run")).unwrap();
        cmd_quant_sweep(&ctx).unwrap();
        let report = cmd_report(&ctx).unwrap();
        assert!(report.contains("delta_vs_none"));
        // The baseline row's delta against itself is exactly zero.
        for line in report.lines().filter(|l| l.starts_with("none,")) {
            assert!(line.ends_with(",+0.0000"), "{line}");
        }
    }

    #[test]
    fn unknown_quant_tap_rejected() {
        let mut cfg = tiny_config();
        cfg.quant.taps = vec!["not_a_tap".into()];
        let dir = tempfile::tempdir().unwrap();
        let ctx = RunContext::new(cfg, dir.path().join("run")).unwrap();
        assert!(matches!(cmd_quant_sweep(&ctx), Err(Error::UnknownTapPoint(_))));
    }
}
