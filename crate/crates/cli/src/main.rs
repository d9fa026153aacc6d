//! `sevnav`: data generation, training, closed-loop evaluation, kernel
//! benchmarking, and gradient checking for the sparse evidential
//! navigation stack.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sevnav_core::fusion::FusionMode;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "sevnav", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file (flat key-value with [sections]).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base RNG seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Drive the oracle over the stock tracks and record a dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Frame count override.
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Train a model on a recorded dataset.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Run closed-loop episodes over fusion modes and seeds.
    Run {
        #[command(flatten)]
        common: Common,
        /// Restrict to one fusion mode (default: all three).
        #[arg(long, value_parser = parse_mode)]
        mode: Option<FusionMode>,
    },
    /// Benchmark naive vs gather-GEMM sparse convolution.
    BenchKernel {
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference checks for every layer and loss gradient.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

fn parse_mode(s: &str) -> Result<FusionMode, String> {
    FusionMode::parse(s).ok_or_else(|| format!("invalid mode {s:?} (none|uniform|evidential)"))
}

fn load_config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(out) = &common.out {
        cfg.paths.out = out.clone();
    }
    Ok(cfg)
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { common, frames } => {
            let mut cfg = load_config(&common)?;
            if let Some(out) = &common.out {
                cfg.paths.data = out.clone();
            }
            if let Some(f) = frames {
                cfg.data.frames = f;
            }
            commands::gen_data::cmd_gen_data(&cfg, common.seed)
        }
        Command::Train { common } => {
            let cfg = load_config(&common)?;
            commands::train::cmd_train(&cfg, common.seed)
        }
        Command::Run { common, mode } => {
            let cfg = load_config(&common)?;
            commands::run::cmd_run(&cfg, common.seed, mode)
        }
        Command::BenchKernel { common } => {
            let cfg = load_config(&common)?;
            commands::bench_kernel::cmd_bench_kernel(&cfg, common.seed)
        }
        Command::Gradcheck { common } => commands::gradcheck::cmd_gradcheck(common.seed),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
