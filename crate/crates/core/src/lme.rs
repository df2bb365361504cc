//! Exact maximum likelihood for the normal-normal model, profiled over
//! `beta` and `sigma2`, plus the exact normal marginal log-likelihood.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::convolution::ConvolutionKind;
use crate::covparam::CovSpec;
use crate::data::{ClusteredData, ModelSpec};
use crate::error::{Error, Result};
use crate::fit::{FitMethod, FitResult, SeMethod};
use crate::gls::{psd_factor, unit_or_known, GlsTerms};
use crate::optim::{bfgs_polish, nelder_mead, NelderMeadOptions};

#[derive(Debug, Clone)]
pub struct LmeConfig {
    pub max_iter: u64,
    pub sd_tolerance: f64,
    /// Starting `xi`; zeros (relative covariance `I`) when `None`.
    pub start_xi: Option<Vec<f64>>,
}

impl Default for LmeConfig {
    fn default() -> Self {
        Self {
            max_iter: 2000,
            sd_tolerance: 1e-10,
            start_xi: None,
        }
    }
}

/// Per-cluster GLS terms for `Psi = diag(v) + Z S Z'`.
pub(crate) fn normal_terms(data: &ClusteredData) -> GlsTerms {
    let mut terms = GlsTerms::with_capacity(data.p(), data.q(), data.n_clusters());
    for c in data.clusters() {
        terms.push(c, &unit_or_known(c), 1.0, 1.0);
    }
    terms
}

/// Profiled objective state at one `xi`.
pub(crate) struct Profile {
    pub beta: DVector<f64>,
    pub sigma2: f64,
    /// Negative log-likelihood.
    pub nll: f64,
    pub inv_info: DMatrix<f64>,
}

/// Maximizes over `beta` (and `sigma2` unless `known`) in closed form at `xi`.
/// `terms` carry weights summing to one per cluster, so `n_obs` is `N`.
pub(crate) fn profile(terms: &GlsTerms, cov: &CovSpec, xi: &[f64], n_obs: usize, known: bool) -> Result<Profile> {
    let b = cov.relative_factor(xi)?;
    let sums = terms.accumulate(&b)?;
    let (beta, rss) = sums.solve()?;
    let n = n_obs as f64;
    let (sigma2, nll) = if known {
        (1.0, 0.5 * n * (2.0 * PI).ln() + 0.5 * sums.logdet + 0.5 * rss)
    } else {
        let s2 = rss / n;
        if !(s2 > 0.0) {
            return Err(Error::numeric("residual variance collapsed to zero"));
        }
        (s2.sqrt(), 0.5 * n * ((2.0 * PI).ln() + s2.ln() + 1.0) + 0.5 * sums.logdet)
    };
    Ok(Profile {
        beta,
        sigma2,
        nll,
        inv_info: sums.inverse_information()?,
    })
}

pub fn fit_lme(data: &ClusteredData, spec: &ModelSpec, cfg: &LmeConfig) -> Result<FitResult> {
    let cov = spec.cov_spec()?;
    let known = spec.known_variances();
    if known && !data.has_known_var() {
        return Err(Error::Data("known-variance mode requires known variances".into()));
    }
    let terms = normal_terms(data);
    let n = data.n_obs();
    let objective = |xi: &[f64]| -> f64 {
        // keep the search away from numerically meaningless scales
        if xi.iter().any(|v| v.abs() > 30.0) {
            return f64::INFINITY;
        }
        profile(&terms, &cov, xi, n, known).map_or(f64::INFINITY, |p| p.nll)
    };
    let m = cov.n_params();
    let x0 = cfg.start_xi.clone().unwrap_or_else(|| vec![0.0; m]);
    if x0.len() != m {
        return Err(Error::Dimension {
            context: "starting xi",
            expected: m,
            got: x0.len(),
        });
    }
    let mut opts = NelderMeadOptions {
        steps: vec![0.5; m],
        max_iter: cfg.max_iter,
        sd_tolerance: cfg.sd_tolerance,
    };
    let first = nelder_mead(&objective, &x0, &opts)?;
    opts.steps = vec![0.1; m];
    let second = nelder_mead(&objective, &first.x, &opts)?;
    let mut best = if second.f <= first.f { second.clone() } else { first.clone() };
    let mut converged = first.converged || second.converged;
    if let Some(p) = bfgs_polish(&objective, &best.x, 200, 1e-6) {
        if p.f <= best.f {
            converged |= p.converged;
            best = p;
        }
    }
    let xi = best.x;
    let prof = profile(&terms, &cov, &xi, n, known)?;
    let sigma1 = cov.sigma1(&xi, prof.sigma2)?;
    let s2sq = prof.sigma2 * prof.sigma2;
    let cov_beta = &prof.inv_info * s2sq;
    let se = cov_beta.diagonal().map(|v| v.max(0.0).sqrt());
    Ok(FitResult {
        kind: ConvolutionKind::NN,
        method: FitMethod::Lme,
        structure: cov.structure(),
        residual_mode: spec.residual_mode,
        fixed_names: data.fixed_names().to_vec(),
        random_names: data.random_names().to_vec(),
        beta: prof.beta,
        sigma1,
        sigma2: prof.sigma2,
        xi: DVector::from_vec(xi),
        loglik: -prof.nll,
        loglik_nodes: None,
        se_beta: Some(se),
        cov_beta: Some(cov_beta),
        se_method: SeMethod::Gls,
        converged,
        iterations: (first.iterations + second.iterations) as usize,
        message: None,
    })
}

/// Exact `sum_i log N(y_i; X_i beta, Z_i Sigma1 Z_i' + sigma2^2 diag(v_i))`
/// with `v_i` the known variances or ones.
pub fn nn_loglik(data: &ClusteredData, beta: &DVector<f64>, sigma1: &DMatrix<f64>, sigma2: f64) -> Result<f64> {
    check_dims(data, beta, sigma1)?;
    if !(sigma2 > 0.0) {
        return Err(Error::domain("sigma2 must be positive"));
    }
    let s2 = sigma2 * sigma2;
    let b = psd_factor(&(sigma1 / s2))?;
    let terms = normal_terms(data);
    let per = terms.per_term(&b, beta)?;
    let mut ll = 0.0;
    for (c, (logdet, quad)) in data.clusters().iter().zip(per) {
        let n = c.len() as f64;
        ll += -0.5 * n * (2.0 * PI).ln() - n * sigma2.ln() - 0.5 * logdet - 0.5 * quad / s2;
    }
    Ok(ll)
}

pub(crate) fn check_dims(data: &ClusteredData, beta: &DVector<f64>, sigma1: &DMatrix<f64>) -> Result<()> {
    if beta.len() != data.p() {
        return Err(Error::Dimension {
            context: "beta",
            expected: data.p(),
            got: beta.len(),
        });
    }
    if sigma1.nrows() != data.q() || sigma1.ncols() != data.q() {
        return Err(Error::Dimension {
            context: "Sigma1",
            expected: data.q(),
            got: sigma1.nrows(),
        });
    }
    Ok(())
}
