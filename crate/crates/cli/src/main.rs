mod commands;
mod example41;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

/// Exit-time stochastic control experiments.
#[derive(Parser, Debug)]
#[command(name = "exitcontrol", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct GlobalArgs {
    /// Scenario file (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Built-in scenario used when no config file is given.
    #[arg(long, global = true, default_value = "example41_stochastic")]
    pub scenario: String,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, env = "EXITCONTROL_OUT", default_value = "exitcontrol-out")]
    pub out: PathBuf,
    /// Monte Carlo time step.
    #[arg(long, global = true)]
    pub dt: Option<f64>,
    #[arg(long, global = true)]
    pub paths: Option<usize>,
    /// Comma-separated penalization parameters.
    #[arg(long, global = true, value_delimiter = ',')]
    pub eps: Option<Vec<f64>>,
    /// Override a config key, e.g. `--set run.seed=3` or `--set domain.hi=2`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug, Clone, Serialize)]
pub enum Command {
    /// Simulate one batch of paths and write per-path summaries.
    Simulate(SimulateArgs),
    /// Point or grid value estimates, stopped or penalized.
    Value(ValueArgs),
    /// Finite-difference HJB solve with feedback-policy export.
    Hjb(HjbArgs),
    /// Boundary regularity scan.
    Regularity(RegularityArgs),
    /// Run one diagnostic test.
    Diagnose(Box<DiagnoseArgs>),
    /// All checks on the tangency example.
    Example41(Example41Args),
    /// Penalized values on the boundary as a function of eps.
    Dini(DiniArgs),
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 0.0)]
    pub t: f64,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    pub x: Vec<f64>,
    /// Index into the control set for the constant policy.
    #[arg(long, default_value_t = 0)]
    pub control: usize,
    #[arg(long)]
    pub penalized: bool,
    /// Also write the binary path dump.
    #[arg(long)]
    pub dump: bool,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct ValueArgs {
    #[arg(long, default_value_t = 0.0)]
    pub t: f64,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x: Option<Vec<f64>>,
    /// Estimate on a grid over `[0, T] ×` the bounding box instead of a point.
    #[arg(long)]
    pub field: bool,
    #[arg(long, default_value_t = 11)]
    pub time_nodes: usize,
    #[arg(long, default_value_t = 11)]
    pub space_nodes: usize,
    #[arg(long)]
    pub penalized: bool,
    /// Add the HJB feedback policy solved at this spacing to the policy family.
    #[arg(long)]
    pub hjb_policy: Option<f64>,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct HjbArgs {
    /// Spacing per axis; one value is reused for every axis.
    #[arg(long, value_delimiter = ',', default_value = "0.01")]
    pub dx: Vec<f64>,
    /// Fixed time step; the default picks one from the CFL bound.
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long, default_value_t = 201)]
    pub output_times: usize,
    /// Allow off-diagonal covariance with the seven-point stencil.
    #[arg(long)]
    pub wide_stencil: bool,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct RegularityArgs {
    /// Sample times `k·T/n`, `k = 0..n`.
    #[arg(long, default_value_t = 20)]
    pub times: usize,
    #[arg(long, default_value_t = 8)]
    pub per_axis: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub margin: f64,
    /// Skip the `u = 0` check of the generator inequality.
    #[arg(long)]
    pub no_condition9: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DiagnosticName {
    ImmediateExit,
    Martingale,
    Dwell,
    Sandwich,
    Jump,
    Modulus,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct DiagnoseArgs {
    pub test: DiagnosticName,
    #[arg(long, default_value_t = 0.0)]
    pub t: f64,
    /// Boundary point (immediate-exit) or interior point (dwell).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub y: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub control: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0.01)]
    pub delta: f64,
    /// Dwell radii.
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.2")]
    pub hs: Vec<f64>,
    #[arg(long, default_value_t = 1000)]
    pub steps_per_cell: usize,
    /// Steps for the martingale test.
    #[arg(long, default_value_t = 10_000)]
    pub n_steps: usize,
    /// Volatility `σ̂(t, x)` for the martingale test, with `t` the time and `x` the current value.
    #[arg(long, allow_hyphen_values = true)]
    pub sigma_hat: Option<String>,
    /// Curve `x(t)` for the jump probe.
    #[arg(long, default_value = "-t^2 + 2*t", allow_hyphen_values = true)]
    pub curve: String,
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    pub times: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.04,0.02,0.01")]
    pub offsets: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub axis: usize,
    /// Interior points `t:x0,x1;t:x0,...` for the sandwich test.
    #[arg(long, allow_hyphen_values = true)]
    pub points: Option<String>,
    /// Boundary sample times per boundary point for `ĥ(ε)`.
    #[arg(long, default_value_t = 4)]
    pub boundary_times: usize,
    #[arg(long, default_value_t = 1)]
    pub per_axis: usize,
    #[arg(long, default_value_t = 50)]
    pub pairs: usize,
    /// Draw the second point of each pair within `dx,dt` of the first.
    #[arg(long, value_delimiter = ',')]
    pub local: Option<Vec<f64>>,
    /// Pass threshold; each test has its own default.
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct Example41Args {
    /// Skip the finite-difference comparison.
    #[arg(long)]
    pub skip_fd: bool,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct DiniArgs {
    /// Sample times `(k + ½)·T/n`, `k = 0..n`.
    #[arg(long, default_value_t = 4)]
    pub times: usize,
    #[arg(long, default_value_t = 1)]
    pub per_axis: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run::execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
