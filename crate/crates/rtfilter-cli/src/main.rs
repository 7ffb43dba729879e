use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rtfilter_cli::commands::{run, RunArgs};

/// Validation harness for the radial-tangential filtering library.
#[derive(Parser)]
#[command(name = "rtfilter", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Report output path (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the Monte Carlo path count.
    #[arg(long)]
    paths: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one trajectory and export it as CSV.
    Simulate(Common),
    /// Validate the closed-form covariance against Monte Carlo ensembles.
    ValidateCov(Common),
    /// Run the attention oracle and invariant suites.
    AttentionCheck(Common),
    /// Track per-layer directional losses of shared-weight stacks.
    IrlsDescent(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, common) = match &cli.command {
        Command::Simulate(c) => ("simulate", c),
        Command::ValidateCov(c) => ("validate-cov", c),
        Command::AttentionCheck(c) => ("attention-check", c),
        Command::IrlsDescent(c) => ("irls-descent", c),
    };
    let args = RunArgs {
        config: common.config.clone(),
        out: common.out.clone(),
        seed: common.seed,
        paths: common.paths,
    };
    match run(name, &args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}
