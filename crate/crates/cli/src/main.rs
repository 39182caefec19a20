//! `dapa-lab`: data generation, prior training, pretraining, adaptation and
//! evaluation from one JSON config.
//!
//! Exit codes: 0 success, 1 I/O or other failure, 2 config or usage error,
//! 3 missing prerequisite, 4 numerical failure.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dapa_core::trainer::AdaptMode;

use crate::commands::Invocation;
use crate::config::{Overrides, RunConfig};
use crate::error::CliError;

/// Caps the worker threads used for data generation and batch prediction.
const THREADS_ENV: &str = "DAPA_LAB_THREADS";

#[derive(Parser)]
#[command(name = "dapa-lab", version, about = "Latent pose augmentation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (JSON). Omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the prior, pretrain and adapt seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Adaptation mode; for eval-style commands, selects that mode's adapted checkpoint.
    #[arg(long, value_parser = commands::parse_mode)]
    mode: Option<AdaptMode>,
    /// Output directory (defaults come from `paths` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write into an existing output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Clone)]
struct Source {
    /// Regressor checkpoint to use instead of the configured one.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset (.jsonl, or .json keypoint file); defaults to the target test split.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the source, target-train and target-test datasets.
    GenData(Common),
    /// Train the latent pose prior.
    TrainPrior(Common),
    /// Supervised pretraining on the source domain.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Adapt the pretrained regressor to the target domain.
    Adapt {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Write one JSON line per synthetic sample.
        #[arg(long)]
        provenance: bool,
    },
    /// Score a checkpoint on a labelled dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
    },
    /// Overlay the PCK curves of several eval directories.
    PlotPck {
        #[command(flatten)]
        common: Common,
        /// Eval output directory; repeat for more series.
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Write a body mesh as OBJ: the rest pose, or one sample's prediction.
    ExportMesh {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        sample: Option<String>,
    },
    /// Latent norms of a checkpoint's predicted poses under the prior.
    LatentDiag {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
    },
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(CliError::other)
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    let (common, inv, f): (Common, Invocation, fn(&RunConfig, &Invocation) -> Result<(), CliError>) = match cli.command {
        Command::GenData(c) => (c, Invocation::default(), commands::gen_data),
        Command::TrainPrior(c) => (c, Invocation::default(), commands::train_prior_cmd),
        Command::Pretrain { common, resume } => (
            common,
            Invocation {
                resume,
                ..Default::default()
            },
            commands::pretrain_cmd,
        ),
        Command::Adapt {
            common,
            resume,
            provenance,
        } => (
            common,
            Invocation {
                resume,
                provenance,
                ..Default::default()
            },
            commands::adapt_cmd,
        ),
        Command::Eval { common, source } => (common, from_source(source), commands::eval_cmd),
        Command::PlotPck { common, inputs } => (
            common,
            Invocation {
                inputs,
                ..Default::default()
            },
            commands::plot_pck,
        ),
        Command::ExportMesh { common, source, sample } => (
            common,
            Invocation {
                sample,
                ..from_source(source)
            },
            commands::export_mesh,
        ),
        Command::LatentDiag { common, source } => (common, from_source(source), commands::latent_diag),
    };
    let base = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = base.finalize(&Overrides {
        seed: common.seed,
        mode: common.mode,
    })?;
    let inv = Invocation {
        out: common.out,
        force: common.force,
        mode_given: common.mode.is_some(),
        ..inv
    };
    f(&cfg, &inv)
}

fn from_source(s: Source) -> Invocation {
    Invocation {
        checkpoint: s.checkpoint,
        dataset: s.dataset,
        ..Default::default()
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dapa-lab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
