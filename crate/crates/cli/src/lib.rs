//! `accessperf` command-line front end.
//!
//! Every command writes its datasets plus a `manifest.json` into the output
//! directory. `replay` re-runs a manifest and checks the outputs match.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

mod commands;
mod error;
pub mod manifest;
mod output;

pub use error::CliError;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "ACCESSPERF_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "accessperf-out";

#[derive(Debug, Parser)]
#[command(
    name = "accessperf",
    version,
    about = "Per-user throughput of shared access networks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Seed for simulation commands; overrides the document seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = OUT_DIR_ENV, default_value = DEFAULT_OUT_DIR)]
    pub out: PathBuf,
    /// Dataset format.
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Closed-form utilization, transfer times and throughputs of a class mix.
    Predict {
        /// Scenario document (TOML).
        config: PathBuf,
    },
    /// Event-driven simulation of a scenario.
    Simulate {
        /// Scenario document (TOML) with `horizon`.
        config: PathBuf,
        /// Also write every completed transfer.
        #[arg(long)]
        trace: bool,
    },
    /// Speed-test sweep over a load grid: analytic vs simulated curves and scatter.
    Validate {
        /// Sweep document (TOML).
        sweep: PathBuf,
    },
    /// Classify areas against speed targets under demand growth.
    Plan {
        /// Area records (CSV).
        records: PathBuf,
        /// Annual growth of peak utilization.
        #[arg(long, default_value_t = 0.0)]
        growth: f64,
        /// Years projected after the base year.
        #[arg(long, default_value_t = 5)]
        years: u32,
        /// Target as `name:download:upload`, e.g. `fwa:300Mb/s:50Mb/s`.
        /// Repeatable; defaults to the built-in targets.
        #[arg(long = "threshold")]
        thresholds: Vec<String>,
    },
    /// Estimate utilization from measured speeds.
    InferRho {
        /// Speed samples (CSV).
        samples: PathBuf,
        /// MCS rate table (TOML) for rows that give `mcs` instead of `channel_rate`.
        #[arg(long)]
        rate_table: Option<PathBuf>,
        /// Largest tolerated fraction of malformed rows.
        #[arg(long, default_value_t = 0.1)]
        max_malformed: f64,
    },
    /// Re-run a manifest and compare output digests.
    Replay { manifest: PathBuf },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Predict { .. } => "predict",
            Command::Simulate { .. } => "simulate",
            Command::Validate { .. } => "validate",
            Command::Plan { .. } => "plan",
            Command::InferRho { .. } => "infer-rho",
            Command::Replay { .. } => "replay",
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { error::EXIT_INPUT } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::run(&cli.command, cli.seed, &cli.out, cli.format) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
