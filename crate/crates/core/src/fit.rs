//! Fit results and the fitter dispatcher.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::convolution::ConvolutionKind;
use crate::covparam::CovStructure;
use crate::data::{validate, ClusteredData, ModelSpec, ResidualMode};
use crate::error::{Error, Result};
use crate::lme::{fit_lme, LmeConfig};
use crate::mcem::{fit_mcem, McemConfig};
use crate::quadrature::{fit_quadrature_ml, QuadratureFitConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    /// Exact normal-normal maximum likelihood.
    Lme,
    Quadrature,
    Mcem,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeMethod {
    /// `sigma2^2 (sum X'Psi^-1 X)^-1`.
    Gls,
    /// Inverse finite-difference Hessian of the log-likelihood.
    Hessian,
    Bootstrap,
    None,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub kind: ConvolutionKind,
    pub method: FitMethod,
    pub structure: CovStructure,
    pub residual_mode: ResidualMode,
    pub fixed_names: Vec<String>,
    pub random_names: Vec<String>,
    pub beta: DVector<f64>,
    pub sigma1: DMatrix<f64>,
    pub sigma2: f64,
    pub xi: DVector<f64>,
    pub loglik: f64,
    /// Quadrature nodes per dimension used for `loglik`; `None` when exact.
    pub loglik_nodes: Option<usize>,
    pub se_beta: Option<DVector<f64>>,
    pub cov_beta: Option<DMatrix<f64>>,
    pub se_method: SeMethod,
    pub converged: bool,
    pub iterations: usize,
    pub message: Option<String>,
}

impl FitResult {
    /// `(beta, xi, sigma2)` stacked; `sigma2` is omitted for known variances.
    pub fn theta(&self) -> DVector<f64> {
        let mut v: Vec<f64> = self.beta.iter().chain(self.xi.iter()).copied().collect();
        if self.residual_mode == ResidualMode::EstimatedScale {
            v.push(self.sigma2);
        }
        DVector::from_vec(v)
    }

    pub fn theta_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.fixed_names.iter().map(|n| format!("beta[{n}]")).collect();
        names.extend((0..self.xi.len()).map(|k| format!("xi[{}]", k + 1)));
        if self.residual_mode == ResidualMode::EstimatedScale {
            names.push("sigma2".into());
        }
        names
    }
}

/// Fitter for the non-normal kinds. NN always uses exact maximum likelihood.
#[derive(Debug, Clone)]
pub enum Fitter {
    Quadrature(QuadratureFitConfig),
    Mcem(McemConfig),
}

impl Default for Fitter {
    fn default() -> Self {
        Fitter::Mcem(McemConfig::default())
    }
}

/// Validates `data` against `spec` and fits it.
pub fn fit(data: &ClusteredData, spec: &ModelSpec, fitter: &Fitter) -> Result<FitResult> {
    validate(data, spec)?;
    match (spec.kind, fitter) {
        (ConvolutionKind::NN, _) => fit_lme(data, spec, &LmeConfig::default()),
        (_, Fitter::Mcem(cfg)) => fit_mcem(data, spec, cfg),
        (ConvolutionKind::LN, Fitter::Quadrature(_)) => Err(Error::Unsupported(
            "the quadrature fitter covers NL and LL; fit LN with the mcem fitter".into(),
        )),
        (_, Fitter::Quadrature(cfg)) => fit_quadrature_ml(data, spec, cfg),
    }
}
