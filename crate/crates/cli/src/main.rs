mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use didforge::exec::with_thread_cap;

#[derive(Parser, Debug)]
#[command(
    name = "didforge",
    version,
    about = "Difference-in-differences with covariates"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Group-time ATTs, aggregates and bootstrap inference.
    Estimate(EstimateArgs),
    /// TWFE fit, per-cell weights and the decomposition of alpha.
    Decompose(DecomposeArgs),
    /// Covariate balance under the implicit TWFE weights.
    Diagnose(DiagnoseArgs),
    /// Generate a synthetic panel with its oracle.
    Simulate(SimulateArgs),
}

#[derive(Args, Debug, Clone)]
pub struct InputArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub id_col: Option<String>,
    #[arg(long)]
    pub time_col: Option<String>,
    #[arg(long)]
    pub y_col: Option<String>,
    #[arg(long)]
    pub g_col: Option<String>,
    /// Comma-separated time-varying covariates.
    #[arg(long, value_delimiter = ',')]
    pub xvars: Option<Vec<String>>,
    /// Comma-separated time-invariant covariates.
    #[arg(long, value_delimiter = ',')]
    pub zvars: Option<Vec<String>>,
    /// JSON column mapping; the flags above override it.
    #[arg(long)]
    pub columns: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodArg {
    Ra,
    Ipw,
    Dr,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseArg {
    Varying,
    Universal,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComparisonArg {
    Notyet,
    Never,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum MultiplierArg {
    Rademacher,
    Mammen,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkArg {
    Logit,
    Probit,
}

#[derive(Args, Debug, Clone)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// JSON file with estimator and bootstrap settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    #[arg(long, value_enum)]
    pub base_period: Option<BaseArg>,
    #[arg(long, value_enum)]
    pub comparison: Option<ComparisonArg>,
    #[arg(long, value_enum)]
    pub link: Option<LinkArg>,
    #[arg(long)]
    pub bootstrap_draws: Option<usize>,
    #[arg(long, value_enum)]
    pub multiplier: Option<MultiplierArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub ci_level: Option<f64>,
    /// Normalized interquartile range instead of the bootstrap sd.
    #[arg(long)]
    pub iqr_se: bool,
    /// Empirical-quantile intervals instead of normal ones.
    #[arg(long)]
    pub quantile_ci: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceArg {
    Zero,
    Never,
}

#[derive(Args, Debug, Clone)]
pub struct DecomposeArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Period effects and covariate coefficients removed from outcome paths.
    #[arg(long, value_enum, default_value = "zero")]
    pub reference: ReferenceArg,
}

#[derive(Args, Debug, Clone)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Comma-separated functions such as `dx:x1,post:x1^2,post:x1*z:z1`.
    #[arg(long, value_delimiter = ',')]
    pub functions: Option<Vec<String>>,
    /// Add squares and pairwise products to the default functions.
    #[arg(long)]
    pub extended: bool,
    /// Also report balance under propensity-score weights.
    #[arg(long)]
    pub benchmark: bool,
}

#[derive(Args, Debug, Clone)]
pub struct SimulateArgs {
    #[arg(long, conflicts_with = "dgp_config")]
    pub preset: Option<String>,
    /// JSON generator configuration.
    #[arg(long)]
    pub dgp_config: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

fn threads() -> Option<usize> {
    std::env::var("DIDFORGE_THREADS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n| n > 0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = with_thread_cap(threads(), || match &cli.command {
        Command::Estimate(a) => commands::estimate(a),
        Command::Decompose(a) => commands::decompose(a),
        Command::Diagnose(a) => commands::diagnose(a),
        Command::Simulate(a) => commands::simulate(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            eprintln!("{}", e.report(code));
            ExitCode::from(code)
        }
    }
}
