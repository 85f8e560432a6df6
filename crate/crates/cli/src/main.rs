//! `feel` — plan, simulate, fit and verify FEEL training rounds from the
//! command line.
//!
//! Exit codes: 0 on success, 2 for usage or configuration errors, 3 for
//! runtime failures (infeasible instances, non-converging searches,
//! oversized grids, output errors).

// Threshold checks write `!(x < y)` on purpose: the negation also
// fails NaN, which the direct comparison would silently accept.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "feel",
    version,
    about = "Round planning and simulation for wireless federated edge learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Which optimizer a scenario should use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// Infer from the device kinds in the scenario.
    Auto,
    /// Require an all-CPU fleet.
    Cpu,
    /// Require an all-GPU fleet.
    Gpu,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one round: batchsizes, slots, latency, efficiency.
    Plan {
        /// Scenario file (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Fix the global batchsize instead of optimizing it.
        #[arg(long)]
        global_batch: Option<u64>,
        #[arg(long, value_enum, default_value_t = Mode::Auto)]
        mode: Mode,
        /// Also write the plan as JSON to this path.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run multi-round training simulations for one or more schemes.
    Simulate {
        /// Scenario file (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated scheme list, e.g. `proposed,full_batch`
        /// (overrides the scenario).
        #[arg(long)]
        schemes: Option<String>,
        #[arg(long)]
        rounds: Option<u32>,
        #[arg(long)]
        trials: Option<u32>,
        /// Master seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Report the time at which the loss first reaches this level.
        #[arg(long)]
        threshold: Option<f64>,
        /// Directory for the per-scheme CSV traces and the JSON summary.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Fit a flat-then-linear GPU latency profile to timing samples.
    FitGpu {
        /// CSV of `batch,latency_s` rows; a header line is allowed.
        #[arg(long)]
        samples: PathBuf,
        /// Sustained throughput in FLOP/s recorded alongside the fit.
        #[arg(long, default_value_t = 1e12)]
        flops: f64,
        /// Also write the fitted profile as JSON to this path.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Cross-check the solver against the exhaustive grid oracle.
    Verify {
        /// Scenario file (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Cap the per-device batchsize for both solver and oracle so the
        /// grid stays tractable.
        #[arg(long)]
        batch_cap: Option<u64>,
        /// Slot quantization levels for the grid.
        #[arg(long, default_value_t = 64)]
        slot_levels: u32,
        /// Abort if the grid would evaluate more points than this.
        #[arg(long, default_value_t = 50_000_000)]
        max_points: u128,
        #[arg(long, value_enum, default_value_t = Mode::Auto)]
        mode: Mode,
        /// Also write the comparison report as JSON to this path.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

/// CLI failure with its exit-code class.
#[derive(Debug)]
pub enum CliError {
    /// Bad usage or a bad scenario file: exit code 2.
    Config(String),
    /// A solver, simulation or output failure: exit code 3.
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => m,
        }
    }
}

/// Treat a core error as a configuration problem (exit 2).
pub fn as_config<T>(r: Result<T, feel_core::Error>) -> Result<T, CliError> {
    r.map_err(|e| CliError::Config(e.to_string()))
}

/// Treat a core error as a runtime problem (exit 3).
pub fn as_runtime<T>(r: Result<T, feel_core::Error>) -> Result<T, CliError> {
    r.map_err(|e| CliError::Runtime(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Plan {
            config,
            global_batch,
            mode,
            output,
        } => commands::plan(&config, global_batch, mode, output.as_deref()),
        Command::Simulate {
            config,
            schemes,
            rounds,
            trials,
            seed,
            threshold,
            out_dir,
        } => commands::simulate(
            &config,
            schemes.as_deref(),
            rounds,
            trials,
            seed,
            threshold,
            out_dir.as_deref(),
        ),
        Command::FitGpu {
            samples,
            flops,
            output,
        } => commands::fit_gpu(&samples, flops, output.as_deref()),
        Command::Verify {
            config,
            batch_cap,
            slot_levels,
            max_points,
            mode,
            output,
        } => commands::verify(
            &config,
            batch_cap,
            slot_levels,
            max_points,
            mode,
            output.as_deref(),
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
