use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use fluidnet_cli::{run, ExperimentConfig, Mode, RunOptions, EXIT_CONFIG};

/// Rare-event simulation and moment experiments for fluid networks.
#[derive(Debug, Parser)]
#[command(name = "fluidnet", version)]
struct Args {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the mode given in the configuration.
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Overrides the seed given in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads for the simulations. Results do not depend on it.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let mut cfg = match ExperimentConfig::from_file(&args.config) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    if let Some(mode) = args.mode {
        cfg.mode = Some(mode);
    }
    if let Some(seed) = args.seed {
        cfg.seed = Some(seed);
    }
    let opts = RunOptions {
        out: args.out,
        workers: args.workers,
    };
    ExitCode::from(run(&cfg, &opts) as u8)
}
