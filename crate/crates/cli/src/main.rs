//! `cim-sim`: drives the simulator from a TOML config and writes JSON/CSV
//! artifacts under an output directory.
//!
//! Exit codes: 0 success, 1 verification mismatch, 2 configuration or usage
//! error, 3 dataset missing.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "cim-sim", version, about = "RRAM compute-in-memory simulator")]
pub struct Cli {
    /// TOML run configuration; missing sections take defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `out_dir` from the config).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Forming and program-and-verify Monte Carlo over whole blocks.
    DeviceMc {
        #[arg(long, default_value_t = 100_000)]
        cells: usize,
        #[arg(long, default_value_t = 4)]
        levels: usize,
    },
    /// Truth table and row-parallel gate error rate.
    VerifyLogic {
        /// Compute delay; defaults to the configured one.
        #[arg(long)]
        delay_us: Option<f64>,
        #[arg(long, default_value_t = 1_000_000)]
        samples: u64,
        /// Cells failed before programming.
        #[arg(long, default_value_t = 0)]
        faults: usize,
        /// Checks a deliberately broken gate instead (self-test of the checker).
        #[arg(long, hide = true)]
        negative_control: bool,
    },
    /// Array multiply, squared distance, dot product and convolution
    /// against integer references.
    MacOracle {
        /// All 255×255 operand pairs instead of a random sample.
        #[arg(long)]
        exhaustive: bool,
        #[arg(long, default_value_t = 2000)]
        pairs: usize,
        #[arg(long, default_value_t = 10_000)]
        dots: usize,
        #[arg(long, default_value_t = 0)]
        faults: usize,
    },
    /// Alternating training and pruning on MNIST.
    Train {
        #[arg(long)]
        no_prune: bool,
        /// Overrides `[train] epochs`.
        #[arg(long)]
        epochs: Option<u32>,
        /// Test samples written to features.csv.
        #[arg(long, default_value_t = 100)]
        features: usize,
    },
    /// Inference energy comparison for a network manifest.
    Energy {
        #[arg(long)]
        network: PathBuf,
    },
    /// Empirical gate error rate over a range of compute delays.
    LeakageSweep {
        #[arg(long, default_value_t = 0.5)]
        from_us: f64,
        #[arg(long, default_value_t = 5.0)]
        to_us: f64,
        #[arg(long, default_value_t = 0.25)]
        step_us: f64,
        #[arg(long, default_value_t = 100_000)]
        samples: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
