//! Simulation scenarios and bias / variance / MSE studies.
//!
//! Scenario data: `y_ij = x_ij' beta + z_ij' b_i + e_ij` with
//! `x_ij = z_ij = (1, x1_ij)`, `x1_ij = gamma_i + zeta_ij`, standard normal
//! `gamma_i` and `zeta_ij`. The random effect `b_i` is normal or multivariate
//! Laplace with covariance `Sigma1`; the error is normal or Laplace with
//! standard deviation `sigma2`.

use std::fmt::{self, Write as _};
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convolution::ConvolutionKind;
use crate::covparam::{sigma1_to_xi, CovSpec, CovStructure};
use crate::data::{Cluster, ClusteredData, ModelSpec, ResidualMode, INTERCEPT};
use crate::dist::{sample_laplace_scale_mixture, MultivariateLaplace};
use crate::error::{Error, Result};
use crate::fit::{fit, Fitter};
use crate::gls::psd_factor;
use crate::rng::{derive_seed, stream};

/// Data-generating model of a scenario: 1 NN, 2 NL, 3 LN, 4 LL.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    Nn = 1,
    Nl = 2,
    Ln = 3,
    Ll = 4,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::Nn, Scenario::Nl, Scenario::Ln, Scenario::Ll];

    pub fn from_index(i: u8) -> Result<Self> {
        match i {
            1 => Ok(Scenario::Nn),
            2 => Ok(Scenario::Nl),
            3 => Ok(Scenario::Ln),
            4 => Ok(Scenario::Ll),
            _ => Err(Error::domain(format!("scenario must be 1, 2, 3 or 4, got {i}"))),
        }
    }

    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn kind(self) -> ConvolutionKind {
        match self {
            Scenario::Nn => ConvolutionKind::NN,
            Scenario::Nl => ConvolutionKind::NL,
            Scenario::Ln => ConvolutionKind::LN,
            Scenario::Ll => ConvolutionKind::LL,
        }
    }

    /// Models fitted by default: all four on NN data, otherwise NN and the
    /// generating model.
    pub fn default_models(self) -> Vec<ConvolutionKind> {
        match self {
            Scenario::Nn => vec![ConvolutionKind::NN, ConvolutionKind::NL, ConvolutionKind::LN, ConvolutionKind::LL],
            s => vec![ConvolutionKind::NN, s.kind()],
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({} data)", self.index(), self.kind())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    /// Number of clusters `M`.
    pub clusters: usize,
    /// Observations per cluster `n`.
    pub per_cluster: usize,
    pub beta: DVector<f64>,
    pub sigma1: DMatrix<f64>,
    pub sigma2: f64,
    pub replicates: usize,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn new(scenario: Scenario) -> Self {
        Self {
            scenario,
            clusters: 100,
            per_cluster: 5,
            beta: DVector::from_vec(vec![1.0, 2.0]),
            sigma1: DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]),
            sigma2: 2.0,
            replicates: 100,
            seed: 1,
        }
    }

    fn check(&self) -> Result<()> {
        if self.clusters == 0 || self.per_cluster == 0 {
            return Err(Error::domain("clusters and per_cluster must be positive"));
        }
        if self.beta.len() != 2 || self.sigma1.shape() != (2, 2) {
            return Err(Error::domain("scenarios have two fixed and two random coefficients"));
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(Error::domain("sigma2 must be positive and finite"));
        }
        Ok(())
    }

    /// `xi` of the generating `Sigma1` under the general structure.
    pub fn true_xi(&self) -> Result<DVector<f64>> {
        sigma1_to_xi(&self.sigma1, &CovSpec::new(CovStructure::GeneralSpd, 2)?, self.sigma2)
    }

    /// `(beta0, beta1, xi1, xi2, xi3)` of the generating model.
    pub fn truth(&self) -> Result<Vec<f64>> {
        let mut t: Vec<f64> = self.beta.iter().copied().collect();
        t.extend(self.true_xi()?.iter());
        Ok(t)
    }
}

/// Replicate `replicate` of the scenario; identical whether generated alone
/// or within a study.
pub fn generate_scenario(spec: &ScenarioSpec, replicate: usize) -> Result<ClusteredData> {
    let mut rng = stream(spec.seed, &[u64::from(spec.scenario.index()), replicate as u64]);
    generate_scenario_with(spec, &mut rng)
}

pub fn generate_scenario_with<R: Rng + ?Sized>(spec: &ScenarioSpec, rng: &mut R) -> Result<ClusteredData> {
    spec.check()?;
    let kind = spec.scenario.kind();
    let n = spec.per_cluster;
    let factor = psd_factor(&spec.sigma1)?;
    let laplace_re = if kind.random_effect_is_laplace() {
        Some(MultivariateLaplace::new(spec.sigma1.clone())?)
    } else {
        None
    };
    let width = spec.clusters.to_string().len();
    let mut clusters = Vec::with_capacity(spec.clusters);
    for i in 0..spec.clusters {
        let gamma: f64 = rng.sample(StandardNormal);
        let mut x = DMatrix::from_element(n, 2, 1.0);
        for j in 0..n {
            x[(j, 1)] = gamma + rng.sample::<f64, _>(StandardNormal);
        }
        let b = draw_effect(&factor, laplace_re.as_ref(), rng);
        let mean = &x * (&spec.beta + b);
        let y = DVector::from_fn(n, |j, _| mean[j] + draw_error(kind, spec.sigma2, rng));
        clusters.push(Cluster {
            id: format!("c{:0width$}", i + 1),
            y,
            z: x.clone(),
            x,
            known_var: None,
        });
    }
    let names = vec![INTERCEPT.to_string(), "x1".to_string()];
    ClusteredData::new(clusters, names.clone(), names)
}

fn draw_effect<R: Rng + ?Sized>(factor: &DMatrix<f64>, laplace: Option<&MultivariateLaplace>, rng: &mut R) -> DVector<f64> {
    match laplace {
        Some(mvl) => mvl.sample(rng),
        None => factor * DVector::from_fn(factor.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal)),
    }
}

fn draw_error<R: Rng + ?Sized>(kind: ConvolutionKind, sigma2: f64, rng: &mut R) -> f64 {
    if kind.error_is_laplace() {
        sample_laplace_scale_mixture(0.0, sigma2, rng)
    } else {
        sigma2 * rng.sample::<f64, _>(StandardNormal)
    }
}

/// Moments of one parameter over converged replicates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub bias: f64,
    /// Denominator `R`, so that `mse = variance + bias^2`.
    pub variance: f64,
    pub mse: f64,
}

impl CellStats {
    fn from_estimates(values: &mut [f64], truth: f64) -> Self {
        if values.is_empty() {
            return Self {
                bias: f64::NAN,
                variance: f64::NAN,
                mse: f64::NAN,
            };
        }
        // sorted, so the moments do not depend on completion order
        values.sort_by(f64::total_cmp);
        let r = values.len() as f64;
        let mean = values.iter().sum::<f64>() / r;
        let variance = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / r;
        let bias = mean - truth;
        Self {
            bias,
            variance,
            mse: variance + bias * bias,
        }
    }

    fn ratio_to(&self, base: &CellStats) -> CellStats {
        CellStats {
            bias: self.bias / base.bias,
            variance: self.variance / base.variance,
            mse: self.mse / base.mse,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSummary {
    pub kind: ConvolutionKind,
    pub n_converged: usize,
    pub n_failed: usize,
    pub absolute: Vec<CellStats>,
    /// Signed ratios to the NN model; `None` for NN itself.
    pub relative: Option<Vec<CellStats>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawEstimate {
    pub replicate: usize,
    pub kind: ConvolutionKind,
    pub converged: bool,
    /// Empty when the fit failed.
    pub estimates: Vec<f64>,
    pub message: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimReport {
    pub scenario: Scenario,
    pub replicates: usize,
    pub parameters: Vec<String>,
    pub truth: Vec<f64>,
    pub models: Vec<ModelSummary>,
    pub raw: Vec<RawEstimate>,
}

impl SimReport {
    pub fn model(&self, kind: ConvolutionKind) -> Option<&ModelSummary> {
        self.models.iter().find(|m| m.kind == kind)
    }
}

#[derive(Debug, Clone, Default)]
pub struct StudyOptions {
    /// Fitter for the non-NN models; its seed is re-derived per replicate.
    pub fitter: Fitter,
    /// One line per finished fit on standard error.
    pub verbose: bool,
}

fn with_seed(fitter: &Fitter, seed: u64) -> Fitter {
    match fitter {
        Fitter::Mcem(c) => {
            let mut c = c.clone();
            c.seed = seed;
            Fitter::Mcem(c)
        }
        Fitter::Quadrature(c) => {
            let mut c = c.clone();
            c.seed = seed;
            Fitter::Quadrature(c)
        }
    }
}

/// Fits every replicate with every model in `models` (which must include NN)
/// using the general covariance structure, then summarizes the estimates of
/// `(beta0, beta1, xi1, xi2, xi3)`. Failed or non-converged fits are
/// excluded from the moments and counted.
pub fn run_study(spec: &ScenarioSpec, models: &[ConvolutionKind], opts: &StudyOptions) -> Result<SimReport> {
    spec.check()?;
    if !models.contains(&ConvolutionKind::NN) {
        return Err(Error::domain("the study needs the NN model as its baseline"));
    }
    let truth = spec.truth()?;
    let scen = u64::from(spec.scenario.index());
    let raw: Vec<Vec<RawEstimate>> = (0..spec.replicates)
        .into_par_iter()
        .map(|r| -> Result<Vec<RawEstimate>> {
            let data = generate_scenario(spec, r)?;
            Ok(models
                .iter()
                .map(|&kind| {
                    let mspec = ModelSpec::for_data(kind, CovStructure::GeneralSpd, ResidualMode::EstimatedScale, &data);
                    let seed = derive_seed(spec.seed, &[0x5717, scen, r as u64, kind as u64]);
                    let out = fit(&data, &mspec, &with_seed(&opts.fitter, seed));
                    let est = match out {
                        Ok(f) => RawEstimate {
                            replicate: r,
                            kind,
                            converged: f.converged,
                            estimates: f.beta.iter().chain(f.xi.iter()).copied().collect(),
                            message: f.message,
                        },
                        Err(e) => RawEstimate {
                            replicate: r,
                            kind,
                            converged: false,
                            estimates: Vec::new(),
                            message: Some(e.to_string()),
                        },
                    };
                    if opts.verbose {
                        eprintln!(
                            "study scenario={} replicate={r} model={kind} converged={} estimates={:?}",
                            spec.scenario.index(),
                            est.converged,
                            est.estimates
                        );
                    }
                    est
                })
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let raw: Vec<RawEstimate> = raw.into_iter().flatten().collect();
    let summarize = |kind: ConvolutionKind| -> ModelSummary {
        let ok: Vec<&RawEstimate> = raw
            .iter()
            .filter(|e| e.kind == kind && e.converged && e.estimates.len() == truth.len())
            .collect();
        let absolute = (0..truth.len())
            .map(|p| {
                let mut v: Vec<f64> = ok.iter().map(|e| e.estimates[p]).collect();
                CellStats::from_estimates(&mut v, truth[p])
            })
            .collect();
        ModelSummary {
            kind,
            n_converged: ok.len(),
            n_failed: spec.replicates - ok.len(),
            absolute,
            relative: None,
        }
    };
    let base = summarize(ConvolutionKind::NN);
    let mut summaries = Vec::with_capacity(models.len());
    for &kind in models {
        let mut s = summarize(kind);
        if kind != ConvolutionKind::NN {
            s.relative = Some(s.absolute.iter().zip(&base.absolute).map(|(a, b)| a.ratio_to(b)).collect());
        }
        summaries.push(s);
    }
    Ok(SimReport {
        scenario: spec.scenario,
        replicates: spec.replicates,
        parameters: vec!["beta0".into(), "beta1".into(), "xi1".into(), "xi2".into(), "xi3".into()],
        truth,
        models: summaries,
        raw,
    })
}

/// One row per scenario, model and parameter. `bias`, `variance` and `mse`
/// are ratios to NN where `relative` is true; the `abs_` columns are always
/// absolute.
pub fn write_report_csv<W: Write>(reports: &[SimReport], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "scenario",
        "model",
        "parameter",
        "truth",
        "bias",
        "variance",
        "mse",
        "relative",
        "abs_bias",
        "abs_variance",
        "abs_mse",
        "n_converged",
        "n_failed",
    ])?;
    for rep in reports {
        for m in &rep.models {
            for (p, name) in rep.parameters.iter().enumerate() {
                let a = m.absolute[p];
                let shown = m.relative.as_ref().map_or(a, |r| r[p]);
                w.write_record([
                    rep.scenario.index().to_string(),
                    m.kind.to_string(),
                    name.clone(),
                    rep.truth[p].to_string(),
                    shown.bias.to_string(),
                    shown.variance.to_string(),
                    shown.mse.to_string(),
                    m.relative.is_some().to_string(),
                    a.bias.to_string(),
                    a.variance.to_string(),
                    a.mse.to_string(),
                    m.n_converged.to_string(),
                    m.n_failed.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Replicate-level estimates, one row per replicate and model.
pub fn write_raw_csv<W: Write>(reports: &[SimReport], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["scenario", "replicate", "model", "converged", "beta0", "beta1", "xi1", "xi2", "xi3", "message"])?;
    for rep in reports {
        for e in &rep.raw {
            let mut row = vec![
                rep.scenario.index().to_string(),
                e.replicate.to_string(),
                e.kind.to_string(),
                e.converged.to_string(),
            ];
            for p in 0..rep.parameters.len() {
                row.push(e.estimates.get(p).map_or_else(String::new, f64::to_string));
            }
            row.push(e.message.clone().unwrap_or_default());
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Bias, variance and MSE tables; NN values are absolute and bracketed, the
/// others are ratios to NN.
pub fn format_report_table(reports: &[SimReport], digits: usize) -> String {
    let mut out = String::new();
    let stats: [(&str, fn(&CellStats) -> f64); 3] =
        [("Bias", |c| c.bias), ("Variance", |c| c.variance), ("MSE", |c| c.mse)];
    for (title, get) in stats {
        let _ = writeln!(out, "{title} (NN absolute in brackets; other models relative to NN)");
        if let Some(first) = reports.first() {
            let _ = write!(out, "{:<8}", "");
            for p in &first.parameters {
                let _ = write!(out, "{p:>14}");
            }
            let _ = writeln!(out, "{:>8}", "conv");
        }
        for rep in reports {
            let _ = writeln!(out, "Scenario {}", rep.scenario);
            for m in &rep.models {
                let _ = write!(out, "{:<8}", m.kind.to_string());
                for p in 0..rep.parameters.len() {
                    let cell = match &m.relative {
                        None => format!("({:.*})", digits, get(&m.absolute[p])),
                        Some(r) => format!("{:.*}", digits, get(&r[p])),
                    };
                    let _ = write!(out, "{cell:>14}");
                }
                let _ = writeln!(out, "{:>8}", format!("{}/{}", m.n_converged, rep.replicates));
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn true_xi_of_paper_design() {
        let xi = ScenarioSpec::new(Scenario::Nn).true_xi().unwrap();
        let want = [-0.183, 0.215, -0.398];
        for (a, b) in xi.iter().zip(want) {
            assert!((a - b).abs() < 5e-4, "{xi}");
        }
    }

    #[test]
    fn replicates_are_reproducible_and_indexed() {
        let mut spec = ScenarioSpec::new(Scenario::Ll);
        spec.clusters = 7;
        let a = generate_scenario(&spec, 3).unwrap();
        let b = generate_scenario(&spec, 3).unwrap();
        let c = generate_scenario(&spec, 4).unwrap();
        assert_eq!(a.clusters(), b.clusters());
        assert_ne!(a.clusters()[0].y, c.clusters()[0].y);
        assert_eq!(a.n_clusters(), 7);
        assert_eq!(a.clusters()[0].x.column(0), DVector::from_element(5, 1.0));
        assert_eq!(a.clusters()[0].x, a.clusters()[0].z);
    }

    fn moments(v: &[f64]) -> (f64, f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let c2 = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        let c4 = v.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
        (m, c2, c4 / (c2 * c2) - 3.0)
    }

    #[test]
    fn response_variance_at_unit_design() {
        // at x = (1, 0): var(y) = Sigma1[0,0] + sigma2^2 = 7
        for scenario in Scenario::ALL {
            let spec = ScenarioSpec::new(scenario);
            let kind = scenario.kind();
            let factor = psd_factor(&spec.sigma1).unwrap();
            let mvl = MultivariateLaplace::new(spec.sigma1.clone()).unwrap();
            let lap = kind.random_effect_is_laplace().then_some(&mvl);
            let mut rng = stream(99, &[u64::from(scenario.index())]);
            let ys: Vec<f64> = (0..200_000)
                .map(|_| 1.0 + draw_effect(&factor, lap, &mut rng)[0] + draw_error(kind, 2.0, &mut rng))
                .collect();
            let (_, v, _) = moments(&ys);
            assert!((v / 7.0 - 1.0).abs() < 0.02, "scenario {scenario}: {v}");
        }
    }

    #[test]
    fn random_effect_covariance_and_error_kurtosis() {
        let spec = ScenarioSpec::new(Scenario::Ll);
        let factor = psd_factor(&spec.sigma1).unwrap();
        let mvl = MultivariateLaplace::new(spec.sigma1.clone()).unwrap();
        for lap in [None, Some(&mvl)] {
            let mut rng = stream(5, &[u64::from(lap.is_some())]);
            let n = 200_000;
            let mut s = DMatrix::<f64>::zeros(2, 2);
            for _ in 0..n {
                let b = draw_effect(&factor, lap, &mut rng);
                s += &b * b.transpose() / n as f64;
            }
            for (a, b) in s.iter().zip(spec.sigma1.iter()) {
                assert!((a - b).abs() < 0.02 * 3.0, "{s}");
            }
        }
        let mut rng = stream(6, &[]);
        let e: Vec<f64> = (0..400_000).map(|_| draw_error(ConvolutionKind::LL, 2.0, &mut rng)).collect();
        let (m, v, k) = moments(&e);
        assert!(m.abs() < 0.02 && (v / 4.0 - 1.0).abs() < 0.02, "{m} {v}");
        assert!((k - 3.0).abs() < 0.3, "excess kurtosis {k}");
        let e: Vec<f64> = (0..400_000).map(|_| draw_error(ConvolutionKind::NN, 2.0, &mut rng)).collect();
        assert!(moments(&e).2.abs() < 0.05);
    }

    #[test]
    fn cell_identity() {
        let mut v = vec![1.2, 0.7, 1.9, 1.1, 0.4];
        let c = CellStats::from_estimates(&mut v, 1.0);
        assert!((c.mse - (c.variance + c.bias * c.bias)).abs() < 1e-15);
        let direct = v.iter().map(|x| (x - 1.0) * (x - 1.0)).sum::<f64>() / 5.0;
        assert!((c.mse - direct).abs() < 1e-12);
    }
}
