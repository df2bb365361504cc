//! Command-line arguments. Every struct serializes so the resolved
//! configuration can be echoed into the output.

use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use convmix::{ConvolutionKind, CovStructure};

#[derive(Debug, Parser, Serialize)]
#[command(name = "convmix", version, about = "Normal/Laplace convolution mixed-effects models", args_override_self = true)]
pub struct Cli {
    /// Config file, flat `key = value` lines or a JSON object; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Significant digits for numeric output (default: full round-trip precision).
    #[arg(long, global = true)]
    pub digits: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Evaluate a convolution density.
    #[command(args_override_self = true)]
    Density(DensityArgs),
    /// Fit a model to clustered CSV data and print JSON.
    #[command(args_override_self = true)]
    Fit(FitArgs),
    /// Fit a model and add cluster bootstrap standard errors.
    #[command(args_override_self = true)]
    Bootstrap(BootstrapArgs),
    /// Run the simulation study.
    #[command(args_override_self = true)]
    Simulate(SimulateArgs),
}

pub const SUBCOMMANDS: [&str; 4] = ["density", "fit", "bootstrap", "simulate"];

pub fn parse_kind(s: &str) -> Result<ConvolutionKind, String> {
    s.parse().map_err(|e: convmix::Error| e.to_string())
}

pub fn parse_structure(s: &str) -> Result<CovStructure, String> {
    s.parse().map_err(|e: convmix::Error| e.to_string())
}

#[derive(Debug, Args, Serialize)]
pub struct DensityArgs {
    /// NN, NL, LN or LL.
    #[arg(long, value_parser = parse_kind)]
    pub kind: ConvolutionKind,

    /// Standard deviation of the random-effect component.
    #[arg(long, allow_negative_numbers = true)]
    pub sigma1: f64,

    /// Standard deviation of the error component.
    #[arg(long, allow_negative_numbers = true)]
    pub sigma2: f64,

    /// Evaluation points, comma separated.
    #[arg(long, value_delimiter = ',', num_args = 1.., action = ArgAction::Set, allow_negative_numbers = true)]
    pub at: Vec<f64>,

    /// Grid start (default: -5 standard deviations).
    #[arg(long, allow_negative_numbers = true)]
    pub from: Option<f64>,

    /// Grid end (default: +5 standard deviations).
    #[arg(long, allow_negative_numbers = true)]
    pub to: Option<f64>,

    /// Grid size (default 201).
    #[arg(long)]
    pub points: Option<usize>,

    /// Report total mass and variance by numerical integration.
    #[arg(long)]
    pub check: bool,

    /// CSV destination (default: standard output).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FitterChoice {
    Mcem,
    Quadrature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionChoice {
    QChange,
    ParamChange,
    Either,
}

/// Settings of the non-NN fitters.
#[derive(Debug, Clone, Args, Serialize)]
pub struct FitterArgs {
    #[arg(long, value_enum, default_value_t = FitterChoice::Mcem)]
    pub fitter: FitterChoice,

    /// Quadrature nodes per dimension; also used for the reported MCEM log-likelihood.
    #[arg(long)]
    pub nodes: Option<usize>,

    /// Maximum EM iterations or optimizer iterations.
    #[arg(long)]
    pub max_iter: Option<usize>,

    /// EM stopping tolerance or optimizer simplex tolerance.
    #[arg(long)]
    pub tolerance: Option<f64>,

    /// Monte Carlo draws added per EM iteration.
    #[arg(long)]
    pub k_per_iter: Option<usize>,

    /// Cap on Monte Carlo draws per EM iteration.
    #[arg(long)]
    pub k_max: Option<usize>,

    /// Fixed Monte Carlo size; overrides the linear schedule.
    #[arg(long)]
    pub k_fixed: Option<usize>,

    #[arg(long, value_enum)]
    pub criterion: Option<CriterionChoice>,

    /// Progress on standard error.
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct ModelArgs {
    /// Long-format CSV, one row per observation.
    #[arg(long)]
    pub input: PathBuf,

    #[arg(long)]
    pub cluster: String,

    #[arg(long)]
    pub response: String,

    /// Fixed-effect covariate columns, comma separated.
    #[arg(long, value_delimiter = ',', num_args = 1.., action = ArgAction::Set)]
    pub fixed: Vec<String>,

    /// Random-effect covariate columns, comma separated.
    #[arg(long, value_delimiter = ',', num_args = 1.., action = ArgAction::Set)]
    pub random: Vec<String>,

    #[arg(long)]
    pub no_fixed_intercept: bool,

    #[arg(long)]
    pub no_random_intercept: bool,

    /// Column of known per-observation error variances; fixes sigma2 at 1.
    #[arg(long)]
    pub known_var: Option<String>,

    #[arg(long, value_parser = parse_kind)]
    pub kind: ConvolutionKind,

    /// scaled_identity, diagonal, compound_symmetric or general_spd.
    #[arg(long = "cov", value_parser = parse_structure, default_value = "general_spd")]
    pub cov_structure: CovStructure,

    #[command(flatten)]
    pub fitter: FitterArgs,

    #[arg(long)]
    pub seed: u64,

    /// JSON destination (default: standard output).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct BootstrapArgs {
    #[command(flatten)]
    pub model: ModelArgs,

    /// Bootstrap resamples.
    #[arg(long, default_value_t = 200)]
    pub replicates: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    /// Scenarios 1 to 4, comma separated (default: all).
    #[arg(long, value_delimiter = ',', num_args = 1.., action = ArgAction::Set)]
    pub scenario: Vec<u8>,

    /// Models to fit, comma separated; must include NN (default: NN and the generating model).
    #[arg(long, value_delimiter = ',', num_args = 1.., action = ArgAction::Set, value_parser = parse_kind)]
    pub fitters: Vec<ConvolutionKind>,

    #[arg(long, default_value_t = 100)]
    pub replicates: usize,

    #[arg(long, default_value_t = 100)]
    pub clusters: usize,

    #[arg(long, default_value_t = 5)]
    pub per_cluster: usize,

    #[command(flatten)]
    pub fitter: FitterArgs,

    #[arg(long)]
    pub seed: u64,

    /// Output prefix: writes PREFIX.csv, PREFIX.txt and, with --raw, PREFIX_raw.csv.
    #[arg(long, default_value = "simreport")]
    pub output: PathBuf,

    /// Also write replicate-level estimates.
    #[arg(long)]
    pub raw: bool,
}
