//! Experiment driver for the gated sparse attention models: training,
//! evaluation, cost benchmarking, sink reporting, and gradient checking,
//! all reproducible from a config file and a seed.

mod commands;
mod config;

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use gsa_core::attention::AttentionMode;

use config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "gsa", version, about = "Gated sparse attention experiment driver")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment configuration (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Override the config's attention mode
    /// (standard | sparse_only | gated_only | gsa)
    #[arg(long, value_name = "MODE")]
    mode_override: Option<String>,
    /// Floating-point width: 32 or 64
    #[arg(long, default_value_t = 64)]
    precision: u32,
}

impl CommonArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        if self.precision != 32 && self.precision != 64 {
            bail!("unsupported precision {}; use 32 or 64", self.precision);
        }
        let mode = match &self.mode_override {
            Some(s) => Some(s.parse::<AttentionMode>()?),
            None => None,
        };
        let cfg = ExperimentConfig::load(&self.config)?;
        cfg.resolve(self.seed, self.out_dir.as_deref(), mode)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the training schedule; writes metrics.csv and checkpoint.bin
    Train {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Score a checkpoint on held-out sequences
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint to load (default: <out_dir>/checkpoint.bin)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Held-out sequences to score
        #[arg(long, default_value_t = 16)]
        sequences: usize,
    },
    /// Predict and measure per-layer cost over a length/budget grid
    Bench {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated sequence lengths
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024")]
        lengths: Vec<usize>,
        /// Comma-separated selection budgets
        #[arg(long, value_delimiter = ',', default_value = "32,64,128")]
        budgets: Vec<usize>,
        /// Closed-form speedups only; no measurement, no length cap
        #[arg(long)]
        formula_only: bool,
    },
    /// Report first-token mass, gate means, and activation magnitudes
    SinkReport {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint to load (default: <out_dir>/checkpoint.bin)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Probe sequences to aggregate over
        #[arg(long, default_value_t = 32)]
        sequences: usize,
    },
    /// Finite-difference check of every backward rule, all four modes
    Gradcheck {
        #[command(flatten)]
        common: CommonArgs,
        /// Test fixture: corrupt the named backward rule and expect failure
        #[arg(long, hide = true, value_name = "OP")]
        corrupt_backward: Option<String>,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Train { common } => {
            let cfg = common.resolve()?;
            commands::cmd_train(&cfg, common.precision)
        }
        Cmd::Eval { common, checkpoint, sequences } => {
            let cfg = common.resolve()?;
            commands::cmd_eval(&cfg, checkpoint.as_deref(), sequences, common.precision)
        }
        Cmd::Bench { common, lengths, budgets, formula_only } => {
            let cfg = common.resolve()?;
            commands::cmd_bench(&cfg, &lengths, &budgets, formula_only, common.precision)
        }
        Cmd::SinkReport { common, checkpoint, sequences } => {
            let cfg = common.resolve()?;
            commands::cmd_sink_report(&cfg, checkpoint.as_deref(), sequences, common.precision)
        }
        Cmd::Gradcheck { common, corrupt_backward } => {
            let cfg = common.resolve()?;
            commands::cmd_gradcheck(&cfg, common.precision, corrupt_backward.as_deref())
        }
    }
}
