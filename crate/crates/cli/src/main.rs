//! `scpl`: train component-split networks, simulate iteration schedules,
//! verify gradients, and benchmark pipelined throughput.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use std::path::PathBuf;

use commands::{
    cmd_bench, cmd_gen_data, cmd_gradcheck, cmd_simulate, cmd_train, parse_worker_list, Failure,
};

#[derive(Parser)]
#[command(
    name = "scpl",
    version,
    about = "Decoupled-backpropagation training engine and schedule simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network per a run config ([train]/[model]/[data] tables)
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for metrics, summary, checkpoint and the
        /// resolved-config echo
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        /// Dotted-key config overrides, e.g. --set train.strategy=bp
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Simulate one training iteration under a schedule strategy
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        /// Override the config's strategy
        #[arg(long)]
        strategy: Option<String>,
        /// Override the config's micro-batch count
        #[arg(long)]
        micro_batches: Option<u64>,
        /// Simulate nmp, gpipe, scpl and scpl_gpipe on the same workload
        #[arg(long)]
        all_strategies: bool,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run the finite-difference and gradient-blocking verification suite
    Gradcheck {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Seeded cases per check
        #[arg(long, default_value_t = 100)]
        cases: usize,
        /// Deliberately corrupt the relu backward rule to demonstrate that
        /// the suite detects wrong gradients
        #[arg(long)]
        inject_relu_fault: bool,
    },
    /// Time sequential vs pipelined training with calibrated per-component
    /// compute inflation
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        /// Comma-separated pipeline widths to measure
        #[arg(long, default_value = "1,2,4")]
        workers: String,
        /// Artificial per-component compute per batch, in milliseconds
        #[arg(long, default_value_t = 5.0)]
        inflate_ms: f64,
        /// Override the config's epoch count for the timing runs
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Generate a synthetic dataset with a provenance sidecar
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn main() {
    let cli = Cli::parse();
    let result: Result<(), Failure> = match cli.command {
        Command::Train { config, out_dir, overrides } => {
            cmd_train(&config, &out_dir, &overrides)
        }
        Command::Simulate { config, out_dir, strategy, micro_batches, all_strategies, overrides } => {
            cmd_simulate(&config, &out_dir, strategy, micro_batches, all_strategies, &overrides)
        }
        Command::Gradcheck { seed, cases, inject_relu_fault } => {
            cmd_gradcheck(seed, cases, inject_relu_fault)
        }
        Command::Bench { config, out_dir, workers, inflate_ms, epochs, overrides } => {
            match parse_worker_list(&workers) {
                Ok(list) => cmd_bench(&config, &out_dir, &list, inflate_ms, epochs, &overrides),
                Err(e) => Err(Failure::config(e)),
            }
        }
        Command::GenData { config, out_dir, overrides } => {
            cmd_gen_data(&config, &out_dir, &overrides)
        }
    };
    if let Err(failure) = result {
        eprintln!("error: {}", failure.message);
        std::process::exit(failure.code);
    }
}
