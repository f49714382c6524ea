//! Command-line driver of the four-tank tube MPC pipeline.

mod commands;
mod plots;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "tubempc", version, about = "Tube-based robust MPC for tracking on the four-tank plant")]
pub struct Cli {
    /// TOML configuration; built-in four-tank defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "results")]
    pub out: PathBuf,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Check supplied constants instead of computing them.
    #[arg(long, global = true)]
    pub verify_only: bool,
    /// Use the published K, P, rho and Lipschitz constants.
    #[arg(long, global = true)]
    pub inject_paper_values: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Component-wise Lipschitz constants (estimate or verify).
    Lipschitz,
    /// F/R tube tables and tightened constraints.
    Tubes,
    /// Terminal ingredients and their checks.
    Terminal,
    /// Admissible setpoint region.
    Yt,
    /// One optimal control problem.
    Solve(SolveArgs),
    /// One closed-loop run.
    Simulate(SimulateArgs),
    /// Closed-loop runs over the disturbance grid.
    Batch,
    /// SVG charts from a trace CSV.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    /// Initial state (comma separated); scenario x0 by default.
    #[arg(long, value_delimiter = ',')]
    pub x0: Option<Vec<f64>>,
    /// Target output (comma separated); first schedule target by default.
    #[arg(long, value_delimiter = ',')]
    pub yt: Option<Vec<f64>>,
    /// Also write the predicted trajectory as CSV.
    #[arg(long)]
    pub trajectory: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Constant disturbance (comma separated); scenario value by default.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub w: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Trace CSV written by `simulate` or `batch`.
    #[arg(long)]
    pub trace: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
