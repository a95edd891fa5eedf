use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use excursia::app::{self, Command};
use excursia::config::Overrides;

/// Rare-event probabilities for ODE systems with random initial states.
#[derive(Parser)]
#[command(name = "excursia", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Plain Monte Carlo estimate.
    Mc(Common),
    /// Full pipeline: build the biasing mixture, then importance-sample.
    Estimate(Common),
    /// Rice-integrand grid, Rice-chain trace and autocorrelation tables.
    Diagnose(Common),
    /// Importance sampling with a stored mixture (default: <out>/ibd.json).
    ReuseIbd(Common),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `threads`.
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `mc.samples` for `mc`, `pipeline.is_samples` otherwise.
    #[arg(long)]
    samples: Option<usize>,
    /// Overrides both diagnose grid sizes.
    #[arg(long)]
    resolution: Option<usize>,
    /// Stored mixture; with `estimate`, skips mixture construction.
    #[arg(long)]
    reuse_ibd: Option<PathBuf>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (cmd, c) = match cli.command {
        Cmd::Mc(c) => (Command::Mc, c),
        Cmd::Estimate(c) => (Command::Estimate, c),
        Cmd::Diagnose(c) => (Command::Diagnose, c),
        Cmd::ReuseIbd(c) => (Command::ReuseIbd, c),
    };
    let overrides = Overrides {
        seed: c.seed,
        threads: c.threads,
        out: c.out,
        samples: c.samples,
        resolution: c.resolution,
    };
    std::process::exit(app::main_with(cmd, &c.config, &overrides, c.reuse_ibd.as_deref()));
}
