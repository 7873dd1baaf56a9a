//! Command-line front end: scene generation, training, localization,
//! evaluation, gradient checks and the loss ablation.
//!
//! Exit codes: 0 success, 1 failed gradient check, 2 configuration or input
//! error, 3 diverged training.

mod commands;
mod config;
mod metrics;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::gradcheck::Suite;
use crate::regressor::{LossMode, ModelKind};
use crate::scenegen::Split;

pub use commands::{
    cmd_ablate, cmd_evaluate, cmd_gen_scene, cmd_gradcheck, cmd_localize, cmd_train, run_cell,
    AblationRow, AblationSummary, LocalizeSummary, ModeSummary, TrainSummary,
};
pub use config::{AblateConfig, EvalConfig, GradCheckConfig, Overrides, RunConfig};
pub use metrics::{
    estimates_from_jsonl, estimates_to_jsonl, localize_frames, EstimateRecord, MetricsReport,
    MetricsRow,
};

/// Name of the resolved configuration written into every output directory.
pub const RUN_CONFIG_FILE: &str = "run_config.json";

#[derive(Debug, Error, PartialEq)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Config(_) | CliError::Input(_) => 2,
        }
    }
}

/// How a command that did not error ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    Diverged,
}

impl Outcome {
    pub fn exit_code(self) -> u8 {
        match self {
            Outcome::Success => 0,
            Outcome::Diverged => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "anglereloc",
    version,
    about = "Scene-coordinate regression and relocalization on synthetic scenes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON run configuration; flags below override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub mode: Option<LossMode>,
    #[arg(long, global = true)]
    pub iters: Option<usize>,
    #[arg(long, global = true)]
    pub lambda_multi: Option<f64>,
    #[arg(long, global = true)]
    pub lambda_photo: Option<f64>,
    #[arg(long, global = true)]
    pub rot_thresh_deg: Option<f64>,
    /// Absolute translation threshold (default: 5% of the scene diameter).
    #[arg(long, global = true)]
    pub trans_thresh: Option<f64>,
}

impl CommonArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            mode: self.mode,
            iters: self.iters,
            lambda_multi: self.lambda_multi,
            lambda_photo: self.lambda_photo,
            rot_thresh_deg: self.rot_thresh_deg,
            trans_thresh: self.trans_thresh,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

impl SplitArg {
    pub fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Test => Some(Split::Test),
            SplitArg::All => None,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    GenScene {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train a model on a dataset's training split.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: PathBuf,
        /// patch-mlp or free-table.
        #[arg(long)]
        model: Option<ModelKind>,
    },
    /// Estimate poses of dataset images with a trained model.
    Localize {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Compare an estimates file with a dataset's ground-truth poses.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        estimates: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference checks of every loss gradient.
    Gradcheck {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        configs: Option<usize>,
        /// Fault injection: perturb the analytic gradient of one suite.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Train, localize and evaluate every loss mode over several seeds.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        /// Use this dataset for every seed instead of generating one per seed.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<usize>,
    },
}

impl Command {
    fn common(&self) -> &CommonArgs {
        match self {
            Command::GenScene { common }
            | Command::Train { common, .. }
            | Command::Localize { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Gradcheck { common, .. }
            | Command::Ablate { common, .. } => common,
        }
    }
}

fn parse_suite(name: &str) -> Result<Suite, CliError> {
    Suite::ALL
        .into_iter()
        .find(|s| s.name() == name)
        .ok_or_else(|| CliError::Config(format!("unknown gradient suite '{name}'")))
}

/// Sizes the global rayon pool from `ANGLERELOC_THREADS` when set.
pub fn init_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("ANGLERELOC_THREADS") {
        let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            CliError::Config(format!(
                "ANGLERELOC_THREADS must be a positive integer, got '{v}'"
            ))
        })?;
        // A pool built earlier in the same process wins; that is harmless.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<Outcome, CliError> {
    init_threads()?;
    let common = cli.command.common();
    let mut cfg = RunConfig::resolve(common.config.as_deref(), &common.overrides())?;
    match cli.command {
        Command::GenScene { .. } => cmd_gen_scene(&cfg).map(|_| Outcome::Success),
        Command::Train { data, model, .. } => {
            if let Some(m) = model {
                cfg.model = m;
            }
            cmd_train(&cfg, &data)
        }
        Command::Localize {
            checkpoint,
            data,
            split,
            ..
        } => cmd_localize(&cfg, &checkpoint, &data, split.split()).map(|_| Outcome::Success),
        Command::Evaluate {
            estimates, data, ..
        } => cmd_evaluate(&cfg, &estimates, &data).map(|_| Outcome::Success),
        Command::Gradcheck {
            configs, corrupt, ..
        } => {
            if let Some(n) = configs {
                cfg.gradcheck.configs = n;
                cfg.validate()?;
            }
            let corrupt = corrupt.as_deref().map(parse_suite).transpose()?;
            cmd_gradcheck(&cfg, corrupt).map(|_| Outcome::Success)
        }
        Command::Ablate { data, seeds, .. } => {
            if let Some(n) = seeds {
                cfg.ablate.seeds = n;
                cfg.validate()?;
            }
            cmd_ablate(&cfg, data.as_deref()).map(|_| Outcome::Success)
        }
    }
}

/// Parses the process arguments, runs the command and maps the result to an
/// exit code.
pub fn main_entry() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(outcome) => {
            if outcome == Outcome::Diverged {
                log::warn!("training diverged");
            }
            ExitCode::from(outcome.exit_code())
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
