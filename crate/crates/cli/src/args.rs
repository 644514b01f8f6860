use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "rgseq", version, about = "Design and evaluate random group-sequential likelihood-ratio tests")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optimal rule for given multipliers, or the multipliers for given thresholds.
    Design(DesignArgs),
    /// Exact operating characteristics of a rule.
    Evaluate(EvaluateArgs),
    /// Monte Carlo operating characteristics of a rule.
    Simulate(SimulateArgs),
    /// Stationary value functions on the grid, as CSV.
    ValueDump(ValueDumpArgs),
    /// Run the invariant suite on a model.
    Verify(VerifyArgs),
    /// Search multipliers whose optimal rule meets error targets.
    Frontier(FrontierArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    /// Model file (JSON).
    #[arg(long)]
    pub model: PathBuf,
    /// Rescale group costs so that the mean cost per group is this value.
    #[arg(long)]
    pub c: Option<f64>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GridArgs {
    /// Grid nodes (default: 2048 for lattice laws, 32768 otherwise).
    #[arg(long)]
    pub grid_points: Option<usize>,
    /// The grid covers [d / span, d * span] with d = lambda0 / lambda1 before any widening.
    #[arg(long, default_value_t = 1e6)]
    pub grid_span: f64,
    /// Sup-norm tolerance of the fixed-point iteration.
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    #[arg(long, default_value_t = 10_000)]
    pub max_iter: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StopTieArg {
    Stop,
    Continue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DecisionTieArg {
    Reject,
    Accept,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RuleShapeArgs {
    /// What to do where stopping and continuing cost the same.
    #[arg(long, value_enum, default_value_t = StopTieArg::Stop)]
    pub stop_tie: StopTieArg,
    /// Decision at z equal to the decision threshold.
    #[arg(long, value_enum, default_value_t = DecisionTieArg::Reject)]
    pub decision_tie: DecisionTieArg,
    /// Stop probability at z = A.
    #[arg(long, default_value_t = 1.0)]
    pub gamma_a: f64,
    /// Stop probability at z = B.
    #[arg(long, default_value_t = 1.0)]
    pub gamma_b: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DesignArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub shape: RuleShapeArgs,
    #[arg(long, conflicts_with_all = ["a", "b"], required_unless_present_all = ["a", "b"])]
    pub lambda0: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub lambda1: f64,
    /// Target lower threshold (inverse design, with --B).
    #[arg(long = "A", id = "a", requires = "b")]
    pub a: Option<f64>,
    /// Target upper threshold (inverse design, with --A).
    #[arg(long = "B", id = "b", requires = "a")]
    pub b: Option<f64>,
    /// Design the optimal rule truncated at this many groups.
    #[arg(long, conflicts_with_all = ["a", "b"])]
    pub horizon: Option<usize>,
    /// Where to write the rule file.
    #[arg(long)]
    pub rule_out: Option<PathBuf>,
    /// Where to write the design report (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Rule file (JSON).
    #[arg(long)]
    pub rule: PathBuf,
    /// Largest number of groups propagated.
    #[arg(long, default_value_t = 10_000)]
    pub cap: usize,
    /// Propagation stops once the continuing mass is below this under both hypotheses.
    #[arg(long, default_value_t = 1e-12)]
    pub mass_tol: f64,
    /// Multipliers used to report the Lagrangian.
    #[arg(long, requires = "lambda1")]
    pub lambda0: Option<f64>,
    #[arg(long, requires = "lambda0")]
    pub lambda1: Option<f64>,
    /// CSV file for P_i(tau >= k).
    #[arg(long)]
    pub tail_csv: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum HypothesisArg {
    H0,
    H1,
    Both,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub rule: PathBuf,
    #[arg(long, default_value_t = 100_000)]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Replications still running after this many groups are censored.
    #[arg(long, default_value_t = 10_000)]
    pub cap: usize,
    #[arg(long, value_enum, default_value_t = HypothesisArg::Both)]
    pub hypothesis: HypothesisArg,
    #[arg(long)]
    pub tail_csv: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ValueDumpArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub grid: GridArgs,
    #[arg(long)]
    pub lambda0: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda1: f64,
    /// CSV destination (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub grid: GridArgs,
    /// Default: 20 times the mean cost per group.
    #[arg(long)]
    pub lambda0: Option<f64>,
    /// Default: equal to lambda0.
    #[arg(long)]
    pub lambda1: Option<f64>,
    /// Monte Carlo replications per hypothesis (0 skips the comparison).
    #[arg(long, default_value_t = 100_000)]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 10_000)]
    pub cap: usize,
    /// Largest horizon for the exhaustive search.
    #[arg(long, default_value_t = 3)]
    pub brute_force_horizon: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FrontierArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub grid: GridArgs,
    /// Type I error target.
    #[arg(long)]
    pub alpha: f64,
    /// Type II error target.
    #[arg(long)]
    pub beta: f64,
    #[arg(long, default_value_t = 1e-2)]
    pub lambda_min: f64,
    #[arg(long, default_value_t = 1e6)]
    pub lambda_max: f64,
    /// Relative bracket width at which each bisection stops.
    #[arg(long, default_value_t = 1e-3)]
    pub search_tol: f64,
    #[arg(long, default_value_t = 10_000)]
    pub cap: usize,
    #[arg(long)]
    pub rule_out: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}
