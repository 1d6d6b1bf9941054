//! `psl` — command-line driver for the robustness laboratory.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use psl_core::config::Config;
use psl_core::pipeline::{run_subcommand, RunContext};

#[derive(Parser)]
#[command(
    name = "psl",
    about = "Desk-scale adversarial-robustness laboratory",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Path to the TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Run directory for checkpoints, records, and reports.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the base seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the worker count from the config.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per epsilon in the configured spectrum.
    TrainSpectrum(CommonArgs),
    /// Evaluate the robust-error grid and overdesign selections.
    EvalGrid(CommonArgs),
    /// Sweep the quantization defense over taps, betas, deltas, and attacks.
    QuantSweep(CommonArgs),
    /// Per-layer filter-norm statistics with CSV export.
    FilterNorms(CommonArgs),
    /// Mean of the final pre-activation features per model.
    PreactStats(CommonArgs),
    /// Accuracy under procedural common corruptions.
    CorruptEval(CommonArgs),
    /// Render tables from the accumulated result records.
    Report(CommonArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::TrainSpectrum(_) => "train-spectrum",
            Command::EvalGrid(_) => "eval-grid",
            Command::QuantSweep(_) => "quant-sweep",
            Command::FilterNorms(_) => "filter-norms",
            Command::PreactStats(_) => "preact-stats",
            Command::CorruptEval(_) => "corrupt-eval",
            Command::Report(_) => "report",
        }
    }

    fn args(&self) -> &CommonArgs {
        match self {
            Command::TrainSpectrum(a)
            | Command::EvalGrid(a)
            | Command::QuantSweep(a)
            | Command::FilterNorms(a)
            | Command::PreactStats(a)
            | Command::CorruptEval(a)
            | Command::Report(a) => a,
        }
    }
}

fn run(cli: Cli) -> psl_core::Result<String> {
    let args = cli.command.args();
    let mut cfg = Config::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.run.seed = seed;
    }
    if let Some(jobs) = args.jobs {
        cfg.run.jobs = jobs;
    }
    let ctx = RunContext::new(cfg, &args.out)?;
    run_subcommand(cli.command.name(), &ctx)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
