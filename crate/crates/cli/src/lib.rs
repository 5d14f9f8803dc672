//! Command-line driver: training, evaluation, correctness checks, schedule
//! simulation and profiling, each writing CSV into an output directory.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{Overrides, Preset, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("check failed: {0}")]
    CheckFailed(String),
    #[error(transparent)]
    Core(#[from] kvm_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    /// 2 for configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Core(kvm_core::Error::Config(_)) => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "kvm", version, about = "Key-Value Means attention: training, evaluation and checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration; every field is optional.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Model preset applied beneath the configuration document.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
}

impl Common {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            preset: self.preset,
        }
    }

    pub fn load(&self) -> CliResult<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum LevelArg {
    Fast,
    Full,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes metrics.csv, timing.csv and checkpoint.kvmc.
    Train(#[command(flatten)] Common),
    /// Evaluate a checkpoint on NIAH or loss by position.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        task: Option<config::EvalTask>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Oracle agreement, invariants and gradient checks; exit 1 on failure.
    Check {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        level: Option<LevelArg>,
    },
    /// State size and cost accounting over sequence lengths, with fitted slopes.
    ScheduleSim(#[command(flatten)] Common),
    /// Measured prefill and decode time and state rows per sequence length.
    Profile(#[command(flatten)] Common),
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(c) => commands::train(&c.load()?).map(|_| ()),
        Command::Eval { common, task, checkpoint } => {
            let mut cfg = common.load()?;
            if let Some(t) = task {
                cfg.eval.task = t;
            }
            if checkpoint.is_some() {
                cfg.eval.checkpoint = checkpoint;
            }
            commands::eval(&cfg).map(|_| ())
        }
        Command::Check { common, level } => {
            let mut cfg = common.load()?;
            match level {
                Some(LevelArg::Fast) => cfg.check.level = kvm_core::checks::CheckLevel::Fast,
                Some(LevelArg::Full) => cfg.check.level = kvm_core::checks::CheckLevel::Full,
                None => {}
            }
            commands::check(&cfg).map(|_| ())
        }
        Command::ScheduleSim(c) => commands::schedule_sim(&c.load()?).map(|_| ()),
        Command::Profile(c) => commands::profile(&c.load()?).map(|_| ()),
    }
}

/// Sizes the global thread pool from `KVM_THREADS`, if set.
pub fn init_threads() -> CliResult<()> {
    if let Ok(v) = std::env::var("KVM_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Config(format!("KVM_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    Ok(())
}
