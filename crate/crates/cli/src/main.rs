mod args;
mod config;
mod output;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use serde_json::Value;

use convmix::data::{load_csv, ColumnMapping};
use convmix::integrate::moments;
use convmix::mcem::{Convergence, KSchedule};
use convmix::quadrature::{block_bootstrap_se, QuadratureOptions};
use convmix::simulate::{format_report_table, write_raw_csv, write_report_csv};
use convmix::{
    fit, run_study, ConvolutionKind, ConvolutionParams, Fitter, McemConfig, ModelSpec, QuadratureFitConfig,
    ResidualMode, Scenario, ScenarioSpec, SeMethod, StudyOptions,
};

use args::{BootstrapArgs, Cli, Command, CriterionChoice, DensityArgs, FitArgs, FitterArgs, FitterChoice, ModelArgs, SimulateArgs};
use output::{bootstrap_json, envelope, fit_json, Digits};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] convmix::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use convmix::Error as E;
        match self {
            CliError::Core(E::Numeric(_) | E::Optimizer(_) | E::Sampler(_)) => 4,
            CliError::Json(_) => 4,
            _ => 2,
        }
    }
}

/// What a command achieved; non-convergence maps to exit code 3.
enum Status {
    Done,
    NotConverged,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

/// Writes `text` to `path`, or to standard output when `path` is `None`.
fn emit(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => {
            let mut w = create(p)?;
            w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(io_err(p))
        }
        None => {
            let mut out = io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(io_err(Path::new("<stdout>")))
        }
    }
}

fn cmd_density(a: &DensityArgs, digits: Digits) -> Result<Status, CliError> {
    let p = ConvolutionParams::new(a.sigma1, a.sigma2)?;
    let sd = p.variance().sqrt();
    let grid_given = a.from.is_some() || a.to.is_some() || a.points.is_some();
    if !a.at.is_empty() && grid_given {
        return Err(CliError::Usage("use either --at or --from/--to/--points".into()));
    }
    let ys: Vec<f64> = if !a.at.is_empty() {
        a.at.clone()
    } else if grid_given || !a.check {
        let from = a.from.unwrap_or(-5.0 * sd);
        let to = a.to.unwrap_or(5.0 * sd);
        let n = a.points.unwrap_or(201);
        if n == 0 || !(to >= from) {
            return Err(CliError::Usage("grid needs --points >= 1 and --to >= --from".into()));
        }
        let step = if n > 1 { (to - from) / (n - 1) as f64 } else { 0.0 };
        (0..n).map(|i| from + step * i as f64).collect()
    } else {
        Vec::new()
    };
    let mut report = String::new();
    if a.check {
        let breaks: &[f64] = if a.kind == ConvolutionKind::NN { &[] } else { &[0.0] };
        let (mass, mean, var) = moments(|t| a.kind.pdf(t, &p), breaks, sd);
        report = format!(
            "normalization {}\nmean {}\nvariance {}\nexpected_variance {}\n",
            digits.text(mass),
            digits.text(mean),
            digits.text(var),
            digits.text(p.variance())
        );
    }
    if ys.is_empty() {
        emit(a.output.as_deref(), &report)?;
        return Ok(Status::Done);
    }
    let mut csv = String::from("y,pdf\n");
    for y in ys {
        csv.push_str(&format!("{},{}\n", digits.text(y), digits.text(a.kind.pdf(y, &p))));
    }
    emit(a.output.as_deref(), &csv)?;
    if a.check {
        eprint!("{report}");
    }
    Ok(Status::Done)
}

fn build_fitter(f: &FitterArgs, seed: u64) -> Fitter {
    match f.fitter {
        FitterChoice::Mcem => {
            let d = McemConfig::default();
            let (per_iter, max) = match d.k_schedule {
                KSchedule::Linear { per_iter, max } => (per_iter, max),
                KSchedule::Fixed(k) => (k, k),
            };
            Fitter::Mcem(McemConfig {
                k_schedule: match f.k_fixed {
                    Some(k) => KSchedule::Fixed(k),
                    None => KSchedule::Linear {
                        per_iter: f.k_per_iter.unwrap_or(per_iter),
                        max: f.k_max.unwrap_or(max),
                    },
                },
                max_iter: f.max_iter.unwrap_or(d.max_iter),
                tolerance: f.tolerance.unwrap_or(d.tolerance),
                criterion: match f.criterion {
                    Some(CriterionChoice::QChange) => Convergence::QChange,
                    Some(CriterionChoice::ParamChange) => Convergence::ParamChange,
                    Some(CriterionChoice::Either) | None => d.criterion,
                },
                seed,
                loglik_nodes: f.nodes,
                verbose: f.verbose,
                ..d
            })
        }
        FitterChoice::Quadrature => {
            let d = QuadratureFitConfig::default();
            Fitter::Quadrature(QuadratureFitConfig {
                options: QuadratureOptions {
                    nodes: f.nodes,
                    ..d.options
                },
                max_iter: f.max_iter.map_or(d.max_iter, |m| m as u64),
                sd_tolerance: f.tolerance.unwrap_or(d.sd_tolerance),
                seed,
                ..d
            })
        }
    }
}

fn load_model(m: &ModelArgs) -> Result<(convmix::ClusteredData, ModelSpec), CliError> {
    let mapping = ColumnMapping {
        cluster: m.cluster.clone(),
        response: m.response.clone(),
        fixed: m.fixed.clone(),
        random: m.random.clone(),
        known_var: m.known_var.clone(),
        intercept_fixed: !m.no_fixed_intercept,
        intercept_random: !m.no_random_intercept,
    };
    let data = load_csv(&m.input, &mapping)?;
    let mode = if m.known_var.is_some() {
        ResidualMode::KnownVariances
    } else {
        ResidualMode::EstimatedScale
    };
    let spec = ModelSpec::for_data(m.kind, m.cov_structure, mode, &data);
    Ok((data, spec))
}

fn fit_document(
    command: &str,
    config: Value,
    m: &ModelArgs,
    digits: Digits,
    bootstrap: Option<usize>,
) -> Result<(Value, bool), CliError> {
    let (data, spec) = load_model(m)?;
    let fitter = build_fitter(&m.fitter, m.seed);
    let mut result = fit(&data, &spec, &fitter)?;
    let mut doc = envelope(command, config);
    doc.insert("seed".into(), m.seed.into());
    doc.insert(
        "data".into(),
        serde_json::json!({"clusters": data.n_clusters(), "observations": data.n_obs()}),
    );
    if let Some(b) = bootstrap {
        let boot = block_bootstrap_se(&data, b, m.seed, |d| fit(d, &spec, &fitter))?;
        let p = result.beta.len();
        result.se_beta = Some(boot.se.rows(0, p).into_owned());
        result.se_method = SeMethod::Bootstrap;
        doc.insert("bootstrap".into(), bootstrap_json(&boot, digits));
    }
    doc.insert("result".into(), fit_json(&result, digits));
    Ok((Value::Object(doc), result.converged))
}

fn cmd_fit(a: &FitArgs, config: Value, digits: Digits) -> Result<Status, CliError> {
    let (doc, converged) = fit_document("fit", config, &a.model, digits, None)?;
    emit(a.model.output.as_deref(), &(serde_json::to_string_pretty(&doc)? + "\n"))?;
    Ok(if converged { Status::Done } else { Status::NotConverged })
}

fn cmd_bootstrap(a: &BootstrapArgs, config: Value, digits: Digits) -> Result<Status, CliError> {
    let (doc, converged) = fit_document("bootstrap", config, &a.model, digits, Some(a.replicates))?;
    emit(a.model.output.as_deref(), &(serde_json::to_string_pretty(&doc)? + "\n"))?;
    Ok(if converged { Status::Done } else { Status::NotConverged })
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_simulate(a: &SimulateArgs, digits: Digits) -> Result<Status, CliError> {
    let scenarios: Vec<Scenario> = if a.scenario.is_empty() {
        Scenario::ALL.to_vec()
    } else {
        a.scenario.iter().map(|&s| Scenario::from_index(s)).collect::<Result<_, _>>()?
    };
    if !a.fitters.is_empty() && !a.fitters.contains(&ConvolutionKind::NN) {
        return Err(CliError::Usage("--fitters must include NN, the baseline model".into()));
    }
    let opts = StudyOptions {
        fitter: build_fitter(&a.fitter, a.seed),
        verbose: a.fitter.verbose,
    };
    let mut reports = Vec::with_capacity(scenarios.len());
    for s in scenarios {
        let mut spec = ScenarioSpec::new(s);
        spec.replicates = a.replicates;
        spec.clusters = a.clusters;
        spec.per_cluster = a.per_cluster;
        spec.seed = a.seed;
        let models = if a.fitters.is_empty() { s.default_models() } else { a.fitters.clone() };
        reports.push(run_study(&spec, &models, &opts)?);
    }
    let csv_path = with_suffix(&a.output, ".csv");
    let mut w = create(&csv_path)?;
    write_report_csv(&reports, &mut w)?;
    w.flush().map_err(io_err(&csv_path))?;
    let table = format_report_table(&reports, digits.0.unwrap_or(3));
    emit(Some(&with_suffix(&a.output, ".txt")), &table)?;
    if a.raw {
        let raw_path = with_suffix(&a.output, "_raw.csv");
        let mut w = create(&raw_path)?;
        write_raw_csv(&reports, &mut w)?;
        w.flush().map_err(io_err(&raw_path))?;
    }
    emit(None, &table)?;
    Ok(Status::Done)
}

fn run(cli: &Cli) -> Result<Status, CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("--threads: {e}")))?;
    }
    let digits = Digits(cli.digits);
    if digits.0 == Some(0) {
        return Err(CliError::Usage("--digits must be at least 1".into()));
    }
    let config = serde_json::to_value(cli)?;
    match &cli.command {
        Command::Density(a) => cmd_density(a, digits),
        Command::Fit(a) => cmd_fit(a, config, digits),
        Command::Bootstrap(a) => cmd_bootstrap(a, config, digits),
        Command::Simulate(a) => cmd_simulate(a, digits),
    }
}

fn parse() -> Result<Cli, clap::Error> {
    let argv: Vec<String> = std::env::args().collect();
    let Some(path) = config::config_path(&argv) else {
        return Cli::try_parse_from(&argv);
    };
    let text = std::fs::read_to_string(&path).map_err(|e| {
        clap::Error::raw(clap::error::ErrorKind::Io, format!("cannot read config {}: {e}\n", path.display()))
    })?;
    let flags = config::config_to_flags(&text, &path)
        .map_err(|e| clap::Error::raw(clap::error::ErrorKind::InvalidValue, format!("{e}\n")))?;
    Cli::try_parse_from(config::merge(&argv, flags))
}

fn main() -> ExitCode {
    let cli = match parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(Status::Done) => ExitCode::SUCCESS,
        Ok(Status::NotConverged) => {
            eprintln!("convmix: the fit did not converge; estimates are flagged in the output");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("convmix: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
