use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fqr::cli::{error_json, run, CliConfig, Command};

#[derive(Parser)]
#[command(name = "fqr", version, about = "Functional linear quantile regression")]
struct Args {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit a model at a fixed or criterion-selected cut-off
    Fit(Common),
    /// Predict quantile curves for new subjects
    Predict(Common),
    /// Scan cut-offs under AIC, BIC or GACV
    Select(Common),
    /// Run a Monte Carlo study
    Simulate(Common),
}

#[derive(clap::Args)]
struct Common {
    /// TOML config file
    #[arg(long)]
    config: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Worker thread cap
    #[arg(long)]
    threads: Option<usize>,
    /// Seed override for simulation studies
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let (command, common) = match args.command {
        Cmd::Fit(c) => (Command::Fit, c),
        Cmd::Predict(c) => (Command::Predict, c),
        Cmd::Select(c) => (Command::Select, c),
        Cmd::Simulate(c) => (Command::Simulate, c),
    };
    let cli = CliConfig { command, config: common.config, out: common.out, threads: common.threads, seed: common.seed };
    match run(&cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}
