use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use hyperspde_cli::{run, Command, RunRequest};

/// Simulate and verify first-order hyperbolic stochastic PDEs on a periodic grid.
#[derive(Parser, Debug)]
#[command(name = "hyperspde", version)]
struct Cli {
    /// Experiment to run.
    #[arg(value_enum)]
    command: Command,
    /// JSON experiment config (optional for `selftest`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; takes precedence over HYPERSPDE_OUT_DIR and the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for path-level parallelism.
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let req = RunRequest {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
        threads: cli.threads,
    };
    match run(cli.command, &req) {
        Ok(outcome) => {
            for line in &outcome.report {
                println!("{line}");
            }
            println!("status = {}", outcome.status);
            println!("manifest = {}", outcome.manifest.display());
            ExitCode::from(outcome.exit_code as u8)
        }
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
