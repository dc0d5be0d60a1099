//! `abundance`: simulate, fit and summarise the latent abundance model.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use latent_abundance::schedule::ExecMode;

/// Bad flags or configuration; exits with status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "abundance", version, about = "Latent spatial abundance model: simulate, fit, summarise")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate cells, sites and ground truth from the `[simulate]` section.
    Simulate {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the sampler and persist retained draws.
    Fit {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long)]
        mode: Option<ExecMode>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from `<out>/checkpoint.json`.
        #[arg(long)]
        resume: bool,
        /// Reference run length and priors, whatever the config says.
        #[arg(long)]
        reference_settings: bool,
    },
    /// Posterior map products and the coefficient table from a chain.
    Summarize {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long)]
        chain: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Four category midpoints, comma separated.
        #[arg(long, value_delimiter = ',', num_args = 4)]
        midpoints: Option<Vec<f64>>,
    },
    /// Time the θ sweep over block counts and worker counts.
    PartitionBench {
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Benchmark on the configured cells/sites instead of a synthetic grid.
        #[arg(long)]
        data: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the correctness oracles and write a report.
    Validate {
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Draws per kernel invariance test.
        #[arg(long, default_value_t = 50_000)]
        kernel_draws: usize,
        /// Iterations of each joint-distribution arm.
        #[arg(long, default_value_t = 100_000)]
        joint_length: usize,
        /// Also check that every injected fault is detected.
        #[arg(long)]
        faults: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(|e| e.is::<UsageError>()) {
        return 1;
    }
    for e in err.chain() {
        if let Some(e) = e.downcast_ref::<latent_abundance::Error>() {
            return if e.is_data_error() || matches!(e, latent_abundance::Error::Io(_)) { 2 } else { 3 };
        }
        if e.is::<std::io::Error>() {
            return 2;
        }
    }
    3
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
