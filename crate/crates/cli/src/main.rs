//! `nneb`: train, retrain, extract and evaluate storage bids.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nneb_core::policy::BidMode;

use crate::config::Window;

#[derive(Debug, Parser)]
#[command(name = "nneb", version, about = "Neural-network-embedded bids for energy storage")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set train.n_envs=16`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// First-stage PPO training in one bidding format.
    Train {
        #[arg(long)]
        mode: BidMode,
        #[arg(long)]
        seed: u64,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Training-curve CSV to write.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Cluster first-stage actions into reference levels and retrain the
    /// NNEB policy to be monotone and discrete.
    Retrain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        curve: Option<PathBuf>,
        /// Reference levels JSON to write.
        #[arg(long)]
        levels_out: Option<PathBuf>,
    },
    /// Hourly bid schedule from a retrained NNEB checkpoint.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        window: Window,
        /// Only the first N operating hours of the window.
        #[arg(long)]
        hours: Option<usize>,
    },
    /// Market-faithful profits against the hindsight optimum.
    Evaluate {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        /// Report JSON to write.
        #[arg(long)]
        out: PathBuf,
        /// Directory for per-policy trace CSVs.
        #[arg(long)]
        trace_dir: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        window: Window,
    },
    /// Hindsight-optimal dispatch by dynamic programming.
    Oracle {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        window: Window,
    },
    /// Synthetic 5-minute price CSV.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `data.synthetic_days`.
        #[arg(long)]
        days: Option<usize>,
        /// Defaults to `data.synthetic_seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = config::AppConfig::load(cli.common.config.as_deref(), &cli.common.set)?;
    match cli.command {
        Command::Train { mode, seed, out, curve } => commands::train(config, mode, seed, &out, curve.as_deref()),
        Command::Retrain {
            checkpoint,
            seed,
            out,
            curve,
            levels_out,
        } => commands::retrain(config, &checkpoint, seed, &out, curve.as_deref(), levels_out.as_deref()),
        Command::Extract {
            checkpoint,
            out,
            window,
            hours,
        } => commands::extract(config, &checkpoint, &out, window, hours),
        Command::Evaluate {
            checkpoints,
            out,
            trace_dir,
            window,
        } => commands::evaluate(config, &checkpoints, &out, trace_dir.as_deref(), window),
        Command::Oracle { out, window } => commands::oracle(config, &out, window),
        Command::SynthData { out, days, seed } => commands::synth_data(config, &out, days, seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
