//! Monte Carlo EM for the NL, LN and LL models.
//!
//! Given the latent exponential scales `w` of a cluster, the response is
//! normal with covariance `sigma2^2 Psi`:
//!
//! | kind | latent `w`               | `Psi`                         |
//! |------|--------------------------|-------------------------------|
//! | NL   | `w_1..w_n`               | `Z S Z' + diag(w)`            |
//! | LN   | `w`                      | `w Z S Z' + I`                |
//! | LL   | `w_0`, `w_1..w_n`        | `w_0 Z S Z' + diag(w_1..w_n)` |
//!
//! with `S = Sigma1 / sigma2^2`. With known variances `v` the diagonal
//! parts are multiplied by `v` and `sigma2 = 1`. The E-step draws `w | y` by
//! slice sampling on `log w`; the M-step maximizes the Monte Carlo
//! Q-function, which is available in closed form in `beta` and `sigma2`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;

use crate::convolution::ConvolutionKind;
use crate::covparam::CovSpec;
use crate::data::{Cluster, ClusteredData, ModelSpec};
use crate::error::{Error, Result};
use crate::fit::{FitMethod, FitResult, SeMethod};
use crate::gls::{unit_or_known, GlsTerms};
use crate::lme::{fit_lme, profile, LmeConfig};
use crate::optim::{nelder_mead, NelderMeadOptions};
use crate::quadrature::{default_nodes, marginal_loglik_numeric, QuadratureOptions};
use crate::rng::stream;
use crate::slice::{slice_step, SliceSettings};

/// Current parameter values; `Sigma1 = sigma2^2 S(xi)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Theta {
    pub beta: DVector<f64>,
    pub xi: Vec<f64>,
    pub sigma2: f64,
}

impl Theta {
    fn flat(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.beta.iter().copied().collect();
        v.extend(&self.xi);
        v.push(self.sigma2);
        v
    }
}

/// Number of latent scales of a cluster with `n` observations.
pub fn latent_dim(kind: ConvolutionKind, n: usize) -> Result<usize> {
    match kind {
        ConvolutionKind::NL => Ok(n),
        ConvolutionKind::LN => Ok(1),
        ConvolutionKind::LL => Ok(n + 1),
        ConvolutionKind::NN => Err(Error::Unsupported(
            "the NN model has no latent scales; fit it by exact maximum likelihood".into(),
        )),
    }
}

/// Fills `d` with the diagonal of `Psi` and returns the multiplier of `Z S Z'`.
#[inline]
fn psi_parts(kind: ConvolutionKind, w: &[f64], v: &[f64], d: &mut [f64]) -> f64 {
    match kind {
        ConvolutionKind::NL => {
            for j in 0..d.len() {
                d[j] = w[j] * v[j];
            }
            1.0
        }
        ConvolutionKind::LN => {
            d.copy_from_slice(v);
            w[0]
        }
        ConvolutionKind::LL => {
            for j in 0..d.len() {
                d[j] = w[j + 1] * v[j];
            }
            w[0]
        }
        ConvolutionKind::NN => {
            d.copy_from_slice(v);
            1.0
        }
    }
}

/// `Psi` for one cluster (unit residual variances) given `S = Sigma1 / sigma2^2`.
pub fn build_psi(kind: ConvolutionKind, w: &[f64], z: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = z.nrows();
    let dim = latent_dim(kind, n)?;
    if w.len() != dim {
        return Err(Error::domain(format!(
            "{kind} needs {dim} latent scales for {n} observations, got {}",
            w.len()
        )));
    }
    if w.iter().any(|x| !(*x > 0.0)) {
        return Err(Error::domain("latent scales must be positive"));
    }
    let mut d = vec![0.0; n];
    let a = psi_parts(kind, w, &vec![1.0; n], &mut d);
    Ok(DMatrix::from_diagonal(&DVector::from_vec(d)) + z * s * z.transpose() * a)
}

/// `log g(y | w) + log h(w)` for one cluster, by dense Cholesky.
pub fn complete_loglik(
    kind: ConvolutionKind,
    cluster: &Cluster,
    w: &[f64],
    beta: &DVector<f64>,
    sigma1: &DMatrix<f64>,
    sigma2: f64,
) -> Result<f64> {
    let s2 = sigma2 * sigma2;
    let n = cluster.len();
    let dim = latent_dim(kind, n)?;
    if w.len() != dim {
        return Err(Error::domain(format!("{kind} needs {dim} latent scales, got {}", w.len())));
    }
    let v = unit_or_known(cluster);
    let mut d = vec![0.0; n];
    let a = psi_parts(kind, w, &v, &mut d);
    let omega = (DMatrix::from_diagonal(&DVector::from_vec(d)) + &cluster.z * sigma1 * cluster.z.transpose() * (a / s2)) * s2;
    let ch = omega.cholesky().ok_or_else(|| {
        Error::numeric(format!(
            "conditional covariance of cluster `{}` is not positive definite at w = {w:?}, sigma2 = {sigma2}",
            cluster.id
        ))
    })?;
    let e = &cluster.y - &cluster.x * beta;
    let logdet = 2.0 * ch.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    let quad = e.dot(&ch.solve(&e));
    let log_h: f64 = -w.iter().sum::<f64>();
    Ok(-0.5 * n as f64 * (2.0 * PI).ln() - 0.5 * logdet - 0.5 * quad + log_h)
}

/// Fast `log g(y | w)` for one cluster at fixed parameters.
struct CondLik<'a> {
    kind: ConvolutionKind,
    n: usize,
    q: usize,
    e: Vec<f64>,
    /// `Z B`, row-major `n x q`.
    zb: Vec<f64>,
    v: Vec<f64>,
    ln_const: f64,
    inv_s2: f64,
    d: Vec<f64>,
    g: Vec<f64>,
    r: Vec<f64>,
    _cluster: std::marker::PhantomData<&'a Cluster>,
}

impl<'a> CondLik<'a> {
    fn new(kind: ConvolutionKind, cluster: &'a Cluster, beta: &DVector<f64>, b: &DMatrix<f64>, sigma2: f64) -> Self {
        let n = cluster.len();
        let q = b.ncols();
        let e: Vec<f64> = (&cluster.y - &cluster.x * beta).iter().copied().collect();
        let zb_m = &cluster.z * b;
        let mut zb = vec![0.0; n * q];
        for i in 0..n {
            for k in 0..q {
                zb[i * q + k] = zb_m[(i, k)];
            }
        }
        let s2 = sigma2 * sigma2;
        Self {
            kind,
            n,
            q,
            e,
            zb,
            v: unit_or_known(cluster),
            ln_const: -0.5 * n as f64 * (2.0 * PI * s2).ln(),
            inv_s2: 1.0 / s2,
            d: vec![0.0; n],
            g: vec![0.0; q * q],
            r: vec![0.0; q],
            _cluster: std::marker::PhantomData,
        }
    }

    fn log_g(&mut self, w: &[f64]) -> f64 {
        let (n, q) = (self.n, self.q);
        let a = psi_parts(self.kind, w, &self.v, &mut self.d);
        if !(a >= 0.0 && a.is_finite()) {
            return f64::NEG_INFINITY;
        }
        self.g.iter_mut().for_each(|x| *x = 0.0);
        self.r.iter_mut().for_each(|x| *x = 0.0);
        let mut logd = 0.0;
        let mut ede = 0.0;
        for i in 0..n {
            let di = self.d[i];
            if !(di > 0.0 && di.is_finite()) {
                return f64::NEG_INFINITY;
            }
            let inv = 1.0 / di;
            logd += di.ln();
            let ei = self.e[i];
            ede += ei * ei * inv;
            let row = &self.zb[i * q..(i + 1) * q];
            for k in 0..q {
                let zk = row[k] * inv;
                self.r[k] += zk * ei;
                for l in 0..=k {
                    self.g[k * q + l] += zk * row[l];
                }
            }
        }
        // H = I + a G, Cholesky in place (lower)
        let h = &mut self.g;
        for k in 0..q {
            for l in 0..=k {
                h[k * q + l] *= a;
            }
            h[k * q + k] += 1.0;
        }
        let mut logdet_h = 0.0;
        for j in 0..q {
            let mut s = h[j * q + j];
            for k in 0..j {
                s -= h[j * q + k] * h[j * q + k];
            }
            if !(s > 0.0) {
                return f64::NEG_INFINITY;
            }
            let l = s.sqrt();
            h[j * q + j] = l;
            logdet_h += 2.0 * l.ln();
            for i in j + 1..q {
                let mut s = h[i * q + j];
                for k in 0..j {
                    s -= h[i * q + k] * h[j * q + k];
                }
                h[i * q + j] = s / l;
            }
        }
        // t = L^-1 r
        let mut tt = 0.0;
        for j in 0..q {
            let mut s = self.r[j];
            for k in 0..j {
                s -= h[j * q + k] * self.r[k];
            }
            let t = s / h[j * q + j];
            self.r[j] = t;
            tt += t * t;
        }
        let quad = ede - a * tt;
        self.ln_const - 0.5 * (logd + logdet_h) - 0.5 * quad * self.inv_s2
    }
}

/// Latent draws of one cluster: `k` rows of `dim` scales.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterDraws {
    pub dim: usize,
    pub w: Vec<f64>,
    /// Final chain state in `log w`, used to warm-start the next E-step.
    pub last: Vec<f64>,
}

impl ClusterDraws {
    pub fn k(&self) -> usize {
        self.w.len() / self.dim
    }

    pub fn draw(&self, k: usize) -> &[f64] {
        &self.w[k * self.dim..(k + 1) * self.dim]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SamplerOptions {
    pub burn_in: usize,
    pub slice: SliceSettings,
    /// When false the target is the prior alone (a sampler check).
    pub likelihood: bool,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self {
            burn_in: 10,
            slice: SliceSettings::default(),
            likelihood: true,
        }
    }
}

/// Draws `k` samples of `w | y` after `burn_in` sweeps of component-wise
/// slice sampling on `log w`. `init` is a starting state in `log w`.
#[allow(clippy::too_many_arguments)]
pub fn sample_w_conditional<R: Rng + ?Sized>(
    kind: ConvolutionKind,
    cluster: &Cluster,
    theta: &Theta,
    cov: &CovSpec,
    k: usize,
    opts: &SamplerOptions,
    init: Option<&[f64]>,
    rng: &mut R,
) -> Result<ClusterDraws> {
    let b = cov.relative_factor(&theta.xi)?;
    let mut lik = CondLik::new(kind, cluster, &theta.beta, &b, theta.sigma2);
    sample_with(kind, cluster, &mut lik, k, opts, init, rng)
}

fn sample_with<R: Rng + ?Sized>(
    kind: ConvolutionKind,
    cluster: &Cluster,
    lik: &mut CondLik<'_>,
    k: usize,
    opts: &SamplerOptions,
    init: Option<&[f64]>,
    rng: &mut R,
) -> Result<ClusterDraws> {
    let dim = latent_dim(kind, cluster.len())?;
    let use_lik = opts.likelihood;
    let target = |u: &[f64], w: &mut [f64], lik: &mut CondLik<'_>| -> f64 {
        let mut prior = 0.0;
        for (wj, uj) in w.iter_mut().zip(u) {
            *wj = uj.exp();
            prior += uj - *wj;
        }
        if use_lik {
            prior + lik.log_g(w)
        } else {
            prior
        }
    };
    let mut u: Vec<f64> = match init {
        Some(s) if s.len() == dim => s.to_vec(),
        _ => vec![0.0; dim],
    };
    let mut w = vec![0.0; dim];
    let mut fu = target(&u, &mut w, lik);
    let mut attempts = 0;
    while !fu.is_finite() {
        attempts += 1;
        if attempts > 10 {
            return Err(Error::Sampler(format!(
                "no valid starting point for the latent scales of cluster `{}`",
                cluster.id
            )));
        }
        for uj in u.iter_mut() {
            let e: f64 = rng.sample(Exp1);
            *uj = e.ln();
        }
        fu = target(&u, &mut w, lik);
    }
    let mut out = Vec::with_capacity(k * dim);
    let mut scratch_u = u.clone();
    for sweep in 0..opts.burn_in + k {
        for j in 0..dim {
            scratch_u.copy_from_slice(&u);
            let (x, fx) = slice_step(
                u[j],
                fu,
                |x| {
                    scratch_u[j] = x;
                    target(&scratch_u, &mut w, lik)
                },
                &opts.slice,
                rng,
            );
            u[j] = x;
            fu = fx;
        }
        if sweep >= opts.burn_in {
            out.extend(u.iter().map(|x| x.exp()));
        }
    }
    Ok(ClusterDraws { dim, w: out, last: u })
}

/// GLS terms of all draws, each weighted `1/K`.
fn draw_terms(kind: ConvolutionKind, data: &ClusteredData, draws: &[ClusterDraws]) -> GlsTerms {
    let total: usize = draws.iter().map(ClusterDraws::k).sum();
    let mut terms = GlsTerms::with_capacity(data.p(), data.q(), total);
    for (c, dr) in data.clusters().iter().zip(draws) {
        let v = unit_or_known(c);
        let mut d = vec![0.0; c.len()];
        let wt = 1.0 / dr.k() as f64;
        for k in 0..dr.k() {
            let a = psi_parts(kind, dr.draw(k), &v, &mut d);
            terms.push(c, &d, a, wt);
        }
    }
    terms
}

fn mean_log_prior(draws: &[ClusterDraws]) -> f64 {
    draws
        .iter()
        .map(|d| -d.w.iter().sum::<f64>() / d.k() as f64)
        .sum()
}

/// Q-function without the `log h(w)` part, from precomputed terms.
fn q_from_terms(terms: &GlsTerms, cov: &CovSpec, theta: &Theta, n_obs: usize) -> Result<f64> {
    let b = cov.relative_factor(&theta.xi)?;
    let s = terms.accumulate(&b)?;
    let quad = s.ypy - 2.0 * theta.beta.dot(&s.xpy) + theta.beta.dot(&(&s.xpx * &theta.beta));
    let s2 = theta.sigma2 * theta.sigma2;
    Ok(-0.5 * n_obs as f64 * (2.0 * PI * s2).ln() - 0.5 * s.logdet - 0.5 * quad / s2)
}

/// `(1/K) sum_k sum_i [log g(y_i | w_ik) + log h(w_ik)]`.
pub fn q_function(
    kind: ConvolutionKind,
    data: &ClusteredData,
    cov: &CovSpec,
    theta: &Theta,
    draws: &[ClusterDraws],
) -> Result<f64> {
    check_draws(data, draws)?;
    let terms = draw_terms(kind, data, draws);
    Ok(q_from_terms(&terms, cov, theta, data.n_obs())? + mean_log_prior(draws))
}

fn check_draws(data: &ClusteredData, draws: &[ClusterDraws]) -> Result<()> {
    if draws.len() != data.n_clusters() {
        return Err(Error::Dimension {
            context: "latent draws per cluster",
            expected: data.n_clusters(),
            got: draws.len(),
        });
    }
    if draws.iter().any(|d| d.w.is_empty()) {
        return Err(Error::domain("each cluster needs at least one draw"));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct MStepOutcome {
    pub theta: Theta,
    pub q_before: f64,
    pub q_after: f64,
    /// `sigma2^2 (sum X'Psi^-1 X / K)^-1` at the new parameters.
    pub cov_beta: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct MStepOptions {
    pub max_iter: u64,
    pub sd_tolerance: f64,
    pub step: f64,
}

impl Default for MStepOptions {
    fn default() -> Self {
        Self {
            max_iter: 600,
            sd_tolerance: 1e-9,
            step: 0.2,
        }
    }
}

/// Maximizes the Monte Carlo Q-function at fixed draws: `beta` and `sigma2`
/// by GLS in closed form for each `xi`, `xi` by Nelder-Mead from its current
/// value. The result never has a lower Q than `theta`.
pub fn m_step(
    kind: ConvolutionKind,
    data: &ClusteredData,
    cov: &CovSpec,
    known_variances: bool,
    theta: &Theta,
    draws: &[ClusterDraws],
    opts: &MStepOptions,
) -> Result<MStepOutcome> {
    check_draws(data, draws)?;
    let terms = draw_terms(kind, data, draws);
    m_step_terms(&terms, data.n_obs(), cov, known_variances, theta, mean_log_prior(draws), opts)
}

fn m_step_terms(
    terms: &GlsTerms,
    n_obs: usize,
    cov: &CovSpec,
    known: bool,
    theta: &Theta,
    log_prior: f64,
    opts: &MStepOptions,
) -> Result<MStepOutcome> {
    let q_before = q_from_terms(terms, cov, theta, n_obs)? + log_prior;
    let objective = |xi: &[f64]| -> f64 {
        if xi.iter().any(|v| v.abs() > 30.0) {
            return f64::INFINITY;
        }
        profile(terms, cov, xi, n_obs, known).map_or(f64::INFINITY, |p| p.nll)
    };
    let m = cov.n_params();
    let nm = NelderMeadOptions {
        steps: vec![opts.step; m],
        max_iter: opts.max_iter,
        sd_tolerance: opts.sd_tolerance,
    };
    let best = nelder_mead(&objective, &theta.xi, &nm)?;
    let prof = profile(terms, cov, &best.x, n_obs, known)?;
    let new = Theta {
        beta: prof.beta.clone(),
        xi: best.x,
        sigma2: prof.sigma2,
    };
    let q_after = -prof.nll + log_prior;
    let cov_beta = &prof.inv_info * (prof.sigma2 * prof.sigma2);
    if q_after < q_before {
        // cannot happen in exact arithmetic; keep the entering point
        let old = profile(terms, cov, &theta.xi, n_obs, known)?;
        return Ok(MStepOutcome {
            theta: theta.clone(),
            q_before,
            q_after: q_before,
            cov_beta: &old.inv_info * (theta.sigma2 * theta.sigma2),
        });
    }
    Ok(MStepOutcome {
        theta: new,
        q_before,
        q_after,
        cov_beta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KSchedule {
    /// `min(per_iter * t, max)` at iteration `t` (1-based).
    Linear { per_iter: usize, max: usize },
    Fixed(usize),
}

impl KSchedule {
    pub fn at(&self, t: usize) -> usize {
        match *self {
            KSchedule::Linear { per_iter, max } => (per_iter * t).min(max).max(1),
            KSchedule::Fixed(k) => k.max(1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Convergence {
    QChange,
    ParamChange,
    Either,
}

#[derive(Debug, Clone)]
pub struct McemConfig {
    pub k_schedule: KSchedule,
    pub max_iter: usize,
    /// Convergence is not declared before this iteration.
    pub min_iter: usize,
    /// Relative tolerance for the stopping rule.
    pub tolerance: f64,
    pub criterion: Convergence,
    pub seed: u64,
    pub sampler: SamplerOptions,
    pub m_step: MStepOptions,
    /// Nodes per dimension for the reported log-likelihood.
    pub loglik_nodes: Option<usize>,
    /// Progress lines on standard error.
    pub verbose: bool,
}

impl Default for McemConfig {
    fn default() -> Self {
        Self {
            k_schedule: KSchedule::Linear { per_iter: 20, max: 500 },
            max_iter: 100,
            min_iter: 5,
            tolerance: 5e-4,
            criterion: Convergence::Either,
            seed: 1,
            sampler: SamplerOptions::default(),
            m_step: MStepOptions::default(),
            loglik_nodes: None,
            verbose: false,
        }
    }
}

/// Runs Monte Carlo EM from the normal-normal fit.
///
/// Stopping rule at iteration `t`: the M-step gain in Q relative to `|Q|`,
/// or the largest relative parameter change, falls below `tolerance`.
pub fn fit_mcem(data: &ClusteredData, spec: &ModelSpec, cfg: &McemConfig) -> Result<FitResult> {
    let kind = spec.kind;
    latent_dim(kind, 1)?;
    let cov = spec.cov_spec()?;
    let known = spec.known_variances();
    let start = fit_lme(data, &spec.with_kind(ConvolutionKind::NN), &LmeConfig::default())?;
    let mut theta = Theta {
        beta: start.beta.clone(),
        xi: start.xi.iter().copied().collect(),
        sigma2: start.sigma2,
    };
    let mut states: Vec<Option<Vec<f64>>> = vec![None; data.n_clusters()];
    let mut converged = false;
    let mut iterations = 0;
    let mut last: Option<MStepOutcome> = None;
    for t in 1..=cfg.max_iter {
        iterations = t;
        let k = cfg.k_schedule.at(t);
        let b = cov.relative_factor(&theta.xi)?;
        let draws: Vec<ClusterDraws> = data
            .clusters()
            .par_iter()
            .zip(states.par_iter())
            .enumerate()
            .map(|(i, (c, init))| {
                let mut rng = stream(cfg.seed, &[t as u64, i as u64]);
                let mut lik = CondLik::new(kind, c, &theta.beta, &b, theta.sigma2);
                sample_with(kind, c, &mut lik, k, &cfg.sampler, init.as_deref(), &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        for (s, d) in states.iter_mut().zip(&draws) {
            *s = Some(d.last.clone());
        }
        let terms = draw_terms(kind, data, &draws);
        let step = m_step_terms(&terms, data.n_obs(), &cov, known, &theta, mean_log_prior(&draws), &cfg.m_step)?;
        let dq = (step.q_after - step.q_before) / step.q_before.abs().max(1e-300);
        let old = theta.flat();
        let new = step.theta.flat();
        let dtheta = old
            .iter()
            .zip(&new)
            .map(|(a, b)| (b - a).abs() / a.abs().max(1e-8))
            .fold(0.0, f64::max);
        if cfg.verbose {
            eprintln!(
                "mcem iter={t} k={k} q={:.6} dq={dq:.3e} dtheta={dtheta:.3e} beta={:?} sigma2={:.6}",
                step.q_after,
                step.theta.beta.as_slice(),
                step.theta.sigma2
            );
        }
        theta = step.theta.clone();
        last = Some(step);
        if t >= cfg.min_iter {
            let q_ok = dq < cfg.tolerance;
            let p_ok = dtheta < cfg.tolerance;
            converged = match cfg.criterion {
                Convergence::QChange => q_ok,
                Convergence::ParamChange => p_ok,
                Convergence::Either => q_ok || p_ok,
            };
            if converged {
                break;
            }
        }
    }
    let last = last.ok_or_else(|| Error::domain("max_iter must be at least 1"))?;
    let sigma2 = if known { 1.0 } else { theta.sigma2 };
    let sigma1 = cov.sigma1(&theta.xi, sigma2)?;
    let nodes = cfg.loglik_nodes.unwrap_or_else(|| default_nodes(data.q()));
    let loglik = marginal_loglik_numeric(
        data,
        kind,
        &theta.beta,
        &sigma1,
        sigma2,
        &QuadratureOptions {
            nodes: Some(nodes),
            ..Default::default()
        },
    )?;
    let se = last.cov_beta.diagonal().map(|v| v.max(0.0).sqrt());
    Ok(FitResult {
        kind,
        method: FitMethod::Mcem,
        structure: cov.structure(),
        residual_mode: spec.residual_mode,
        fixed_names: data.fixed_names().to_vec(),
        random_names: data.random_names().to_vec(),
        beta: theta.beta,
        sigma1,
        sigma2,
        xi: DVector::from_vec(theta.xi),
        loglik,
        loglik_nodes: Some(nodes),
        se_beta: Some(se),
        cov_beta: Some(last.cov_beta),
        se_method: SeMethod::Gls,
        converged,
        iterations,
        message: (!converged).then(|| format!("no convergence within {} iterations", cfg.max_iter)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covparam::CovStructure;
    use crate::data::ResidualMode;
    use crate::integrate::moments;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn cluster(y: &[f64], x: &[f64], z: &[f64], p: usize, q: usize) -> Cluster {
        let n = y.len();
        Cluster {
            id: "c".into(),
            y: DVector::from_column_slice(y),
            x: DMatrix::from_row_slice(n, p, x),
            z: DMatrix::from_row_slice(n, q, z),
            known_var: None,
        }
    }

    #[test]
    fn psi_examples() {
        let z = DMatrix::from_element(2, 1, 1.0);
        let s = DMatrix::from_element(1, 1, 0.5);
        let ll = build_psi(ConvolutionKind::LL, &[2.0, 1.0, 3.0], &z, &s).unwrap();
        assert_eq!(ll, DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 4.0]));
        let zero = DMatrix::zeros(1, 1);
        let nl = build_psi(ConvolutionKind::NL, &[1.0, 1.0], &z, &zero).unwrap();
        assert_eq!(nl, DMatrix::identity(2, 2));
        let a = build_psi(ConvolutionKind::LN, &[1.0], &z, &s).unwrap();
        let b = build_psi(ConvolutionKind::NL, &[1.0, 1.0], &z, &s).unwrap();
        assert_eq!(a, b);
        assert!(build_psi(ConvolutionKind::LL, &[1.0, 1.0], &z, &s).is_err());
    }

    #[test]
    fn complete_loglik_unit_case() {
        let c = cluster(&[0.0], &[1.0], &[1.0], 1, 1);
        let v = complete_loglik(ConvolutionKind::NL, &c, &[1.0], &DVector::zeros(1), &DMatrix::zeros(1, 1), 1.0).unwrap();
        assert!((v + 1.918_938_533_204_672_7).abs() < 1e-14);
        // shifting y and x'beta together
        let c2 = cluster(&[3.0], &[1.0], &[1.0], 1, 1);
        let v2 = complete_loglik(ConvolutionKind::NL, &c2, &[1.0], &DVector::from_element(1, 3.0), &DMatrix::zeros(1, 1), 1.0).unwrap();
        assert!((v - v2).abs() < 1e-14);
    }

    #[test]
    fn fast_conditional_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 4;
        for kind in [ConvolutionKind::NL, ConvolutionKind::LN, ConvolutionKind::LL] {
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let x: Vec<f64> = (0..n * 2).map(|_| rng.random_range(-2.0..2.0)).collect();
            let z: Vec<f64> = (0..n * 2).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut c = cluster(&y, &x, &z, 2, 2);
            c.known_var = Some(DVector::from_fn(n, |_, _| rng.random_range(0.5..2.0)));
            let beta = DVector::from_vec(vec![0.3, -0.7]);
            let cov = CovSpec::new(CovStructure::GeneralSpd, 2).unwrap();
            let xi = [0.2, -0.3, 0.1];
            let sigma2 = 1.4;
            let s1 = cov.sigma1(&xi, sigma2).unwrap();
            let b = cov.relative_factor(&xi).unwrap();
            let mut lik = CondLik::new(kind, &c, &beta, &b, sigma2);
            let dim = latent_dim(kind, n).unwrap();
            let w: Vec<f64> = (0..dim).map(|_| rng.random_range(0.1..3.0)).collect();
            let dense = complete_loglik(kind, &c, &w, &beta, &s1, sigma2).unwrap() + w.iter().sum::<f64>();
            assert!((lik.log_g(&w) - dense).abs() < 1e-10, "{kind}");
        }
    }

    #[test]
    fn q_function_sums_complete_logliks() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let clusters: Vec<Cluster> = (0..3)
            .map(|i| {
                let mut c = cluster(
                    &[rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
                    &[1.0, 0.5, 1.0, -0.5],
                    &[1.0, 1.0],
                    2,
                    1,
                );
                c.id = format!("{i}");
                c
            })
            .collect();
        let data = ClusteredData::new(clusters, vec!["a".into(), "b".into()], vec!["a".into()]).unwrap();
        let cov = CovSpec::new(CovStructure::ScaledIdentity, 1).unwrap();
        let theta = Theta {
            beta: DVector::from_vec(vec![0.2, 0.4]),
            xi: vec![-0.1],
            sigma2: 0.9,
        };
        let s1 = cov.sigma1(&theta.xi, theta.sigma2).unwrap();
        let kind = ConvolutionKind::LL;
        let draws: Vec<ClusterDraws> = (0..3)
            .map(|i| {
                let w = vec![0.5 + i as f64, 1.0, 2.0, 1.5, 0.7, 0.3 + i as f64];
                ClusterDraws { dim: 3, w, last: vec![0.0; 3] }
            })
            .collect();
        let mut want = 0.0;
        for (c, d) in data.clusters().iter().zip(&draws) {
            for k in 0..2 {
                want += 0.5 * complete_loglik(kind, c, d.draw(k), &theta.beta, &s1, theta.sigma2).unwrap();
            }
        }
        let got = q_function(kind, &data, &cov, &theta, &draws).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn identity_psi_m_step_is_ols() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let clusters: Vec<Cluster> = (0..6)
            .map(|i| {
                let x: Vec<f64> = (0..3).flat_map(|_| [1.0, rng.random_range(-2.0..2.0)]).collect();
                let y: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
                let mut c = cluster(&y, &x, &[1.0, 1.0, 1.0], 2, 1);
                c.id = format!("{i}");
                c
            })
            .collect();
        let data = ClusteredData::new(clusters, vec!["a".into(), "b".into()], vec!["a".into()]).unwrap();
        let cov = CovSpec::new(CovStructure::ScaledIdentity, 1).unwrap();
        // w = 1 and S -> 0 give Psi = I
        let draws: Vec<ClusterDraws> = (0..6)
            .map(|_| ClusterDraws { dim: 3, w: vec![1.0; 3], last: vec![0.0; 3] })
            .collect();
        let terms = draw_terms(ConvolutionKind::NL, &data, &draws);
        let p = profile(&terms, &cov, &[-40.0], data.n_obs(), false).unwrap();
        let x = data.stacked_x();
        let y = data.stacked_y();
        let ols = (x.transpose() * &x).try_inverse().unwrap() * x.transpose() * y;
        assert!((p.beta - ols).amax() < 1e-10);
    }

    #[test]
    fn prior_only_sampler_recovers_exponential() {
        let c = cluster(&[0.3, -1.0], &[1.0, 1.0], &[1.0, 1.0], 1, 1);
        let cov = CovSpec::new(CovStructure::ScaledIdentity, 1).unwrap();
        let theta = Theta {
            beta: DVector::zeros(1),
            xi: vec![0.0],
            sigma2: 1.0,
        };
        let opts = SamplerOptions {
            likelihood: false,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = sample_w_conditional(ConvolutionKind::LL, &c, &theta, &cov, 40_000, &opts, None, &mut rng).unwrap();
        let mean = d.w.iter().sum::<f64>() / d.w.len() as f64;
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
        let mut rng2 = ChaCha8Rng::seed_from_u64(5);
        let again = sample_w_conditional(ConvolutionKind::LL, &c, &theta, &cov, 40_000, &opts, None, &mut rng2).unwrap();
        assert_eq!(d, again);
    }

    #[test]
    fn independent_regime_matches_quadrature_moments() {
        // S -> 0: each w_j | e_j has density w^-1/2 exp(-e^2/(2 s^2 w) - w)
        let e = [0.4, -1.7, 2.5];
        let c = cluster(&e, &[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0], 1, 1);
        let cov = CovSpec::new(CovStructure::ScaledIdentity, 1).unwrap();
        let s = 1.2;
        let theta = Theta {
            beta: DVector::zeros(1),
            xi: vec![-25.0],
            sigma2: s,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let k = 60_000;
        let d = sample_w_conditional(ConvolutionKind::NL, &c, &theta, &cov, k, &SamplerOptions::default(), None, &mut rng).unwrap();
        for (j, ej) in e.iter().enumerate() {
            let dens = |w: f64| {
                if w <= 0.0 {
                    0.0
                } else {
                    (-0.5 * w.ln() - ej * ej / (2.0 * s * s * w) - w).exp()
                }
            };
            let (_, mean, var) = moments(dens, &[0.0], 1.0);
            let xs: Vec<f64> = (0..k).map(|i| d.draw(i)[j]).collect();
            let m = xs.iter().sum::<f64>() / k as f64;
            let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / k as f64;
            assert!((m / mean - 1.0).abs() < 0.03, "mean {m} vs {mean}");
            assert!((v / var - 1.0).abs() < 0.03, "var {v} vs {var}");
        }
    }

    fn simulated(kind: ConvolutionKind, m: usize, seed: u64) -> ClusteredData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clusters = (0..m)
            .map(|i| {
                let n = 5;
                let x = DMatrix::from_fn(n, 2, |_, c| if c == 0 { 1.0 } else { rng.sample::<f64, _>(StandardNormal) });
                let u = if kind.random_effect_is_laplace() {
                    crate::dist::sample_laplace_scale_mixture(0.0, 1.2, &mut rng)
                } else {
                    1.2 * rng.sample::<f64, _>(StandardNormal)
                };
                let y = DVector::from_fn(n, |r, _| {
                    let e = if kind.error_is_laplace() {
                        crate::dist::sample_laplace_scale_mixture(0.0, 1.0, &mut rng)
                    } else {
                        rng.sample::<f64, _>(StandardNormal)
                    };
                    1.0 + 2.0 * x[(r, 1)] + u + e
                });
                Cluster {
                    id: format!("{i:03}"),
                    y,
                    x,
                    z: DMatrix::from_element(n, 1, 1.0),
                    known_var: None,
                }
            })
            .collect();
        ClusteredData::new(clusters, vec!["(Intercept)".into(), "x".into()], vec!["(Intercept)".into()]).unwrap()
    }

    #[test]
    fn frozen_draws_ascent() {
        let data = simulated(ConvolutionKind::LL, 30, 2);
        let cov = CovSpec::new(CovStructure::ScaledIdentity, 1).unwrap();
        let theta = Theta {
            beta: DVector::from_vec(vec![0.5, 1.5]),
            xi: vec![0.3],
            sigma2: 1.3,
        };
        let draws: Vec<ClusterDraws> = data
            .clusters()
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let mut rng = stream(1, &[i as u64]);
                sample_w_conditional(ConvolutionKind::LL, c, &theta, &cov, 50, &SamplerOptions::default(), None, &mut rng).unwrap()
            })
            .collect();
        let out = m_step(ConvolutionKind::LL, &data, &cov, false, &theta, &draws, &MStepOptions::default()).unwrap();
        let before = q_function(ConvolutionKind::LL, &data, &cov, &theta, &draws).unwrap();
        let after = q_function(ConvolutionKind::LL, &data, &cov, &out.theta, &draws).unwrap();
        assert!((before - out.q_before).abs() < 1e-8);
        assert!(after >= before - 1e-8, "{after} < {before}");
        assert!((after - out.q_after).abs() < 1e-8);
    }

    #[test]
    fn mcem_is_deterministic_and_recovers_beta() {
        let data = simulated(ConvolutionKind::LN, 60, 11);
        let spec = ModelSpec::for_data(ConvolutionKind::LN, CovStructure::ScaledIdentity, ResidualMode::EstimatedScale, &data);
        let cfg = McemConfig {
            max_iter: 30,
            seed: 3,
            ..Default::default()
        };
        let a = fit_mcem(&data, &spec, &cfg).unwrap();
        let b = fit_mcem(&data, &spec, &cfg).unwrap();
        assert_eq!(a.beta, b.beta);
        assert_eq!(a.xi, b.xi);
        assert_eq!(a.loglik.to_bits(), b.loglik.to_bits());
        assert!((a.beta[1] - 2.0).abs() < 0.2, "{}", a.beta);
        assert!(a.converged);
    }

    #[test]
    fn normal_errors_under_nl_match_nn() {
        let data = simulated(ConvolutionKind::NN, 60, 5);
        let spec = ModelSpec::for_data(ConvolutionKind::NL, CovStructure::ScaledIdentity, ResidualMode::EstimatedScale, &data);
        let nn = fit_lme(&data, &spec.with_kind(ConvolutionKind::NN), &LmeConfig::default()).unwrap();
        let nl = fit_mcem(&data, &spec, &McemConfig { seed: 4, ..Default::default() }).unwrap();
        assert!((nl.beta - nn.beta).amax() < 0.05);
    }
}
