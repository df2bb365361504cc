//! Numerically integrated likelihood and the direct maximum-likelihood fitter.
//!
//! A normal random effect `b = C v` (`C C' = Sigma1`, `v ~ N(0, I)`) is
//! integrated with a tensor Gauss-Hermite rule. A multivariate Laplace random
//! effect is written `b = sqrt(W) C v` with `W ~ Exp(1)` and integrated with
//! Gauss-Laguerre in `W` times Gauss-Hermite in `v`.
//!
//! With Laplace errors the integrand has kinks where a residual changes sign.
//! Along one direction of `v` it is piecewise exponential-linear times a
//! normal density, so that direction is integrated in closed form and the
//! Hermite rule covers the remaining, smooth, `q - 1` directions.

use std::collections::HashMap;
use std::f64::consts::{PI, SQRT_2};
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rayon::prelude::*;

use crate::convolution::ConvolutionKind;
use crate::covparam::CovStructure;
use crate::data::{Cluster, ClusteredData, ModelSpec, ResidualMode};
use crate::error::{Error, Result};
use crate::fit::{FitMethod, FitResult, SeMethod};
use crate::gls::{psd_factor, unit_or_known};
use crate::special::ln_normal_interval;
use crate::lme::{fit_lme, LmeConfig};
use crate::optim::{bfgs_polish, central_hessian, nelder_mead, NelderMeadOptions};
use crate::rng::stream;

const LN_SQRT_2PI: f64 = crate::special::LN_SQRT_2PI;

/// Gauss rule of the Jacobi matrix with diagonal `diag` and off-diagonal
/// `off` for a probability measure. Nodes are eigenvalues; weights use the
/// Christoffel sum `1 / sum_k p_k(x)^2` over the orthonormal polynomials,
/// which keeps relative accuracy at the extreme nodes.
fn golub_welsch(diag: Vec<f64>, off: Vec<f64>) -> (Vec<f64>, Vec<f64>) {
    let k = diag.len();
    if k == 1 {
        return (diag, vec![1.0]);
    }
    let t = DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            diag[i]
        } else if i + 1 == j {
            off[i]
        } else if j + 1 == i {
            off[j]
        } else {
            0.0
        }
    });
    let mut x: Vec<f64> = SymmetricEigen::new(t).eigenvalues.iter().copied().collect();
    x.sort_by(f64::total_cmp);
    let w = x
        .iter()
        .map(|&xi| {
            // p_{j+1} = ((x - a_j) p_j - b_j p_{j-1}) / b_{j+1}, rescaled against overflow
            let (mut prev, mut cur) = (0.0, 1.0);
            let mut sum = 1.0;
            let mut ln_scale = 0.0;
            for j in 0..k - 1 {
                let bj = if j == 0 { 0.0 } else { off[j - 1] };
                let next = ((xi - diag[j]) * cur - bj * prev) / off[j];
                prev = cur;
                cur = next;
                sum += cur * cur;
                if sum > 1e200 {
                    let f = 1e-100;
                    prev *= f;
                    cur *= f;
                    sum *= f * f;
                    ln_scale += 200.0 * std::f64::consts::LN_10;
                }
            }
            (-(sum.ln() + ln_scale)).exp()
        })
        .collect();
    (x, w)
}

type Rule = Arc<(Vec<f64>, Vec<f64>)>;

/// Rules are reused across likelihood evaluations.
fn cached_rule(kind: RuleKind, k: usize) -> Rule {
    static CACHE: OnceLock<Mutex<HashMap<(RuleKind, usize), Rule>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(r) = cache.lock().expect("rule cache poisoned").get(&(kind, k)) {
        return r.clone();
    }
    let rule = Arc::new(match kind {
        RuleKind::GaussHermite => gauss_hermite_nodes(k),
        RuleKind::GaussLaguerre => gauss_laguerre_nodes(k),
    });
    cache.lock().expect("rule cache poisoned").insert((kind, k), rule.clone());
    rule
}

/// Nodes and weights with `int f(v) phi(v) dv ~ sum w_k f(v_k)`.
pub fn gauss_hermite_nodes(k: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(k >= 1, "need at least one node");
    let (mut x, mut w) = golub_welsch(vec![0.0; k], (1..k).map(|i| (i as f64).sqrt()).collect());
    // exact symmetry
    for i in 0..k / 2 {
        let j = k - 1 - i;
        let xm = 0.5 * (x[j] - x[i]);
        let wm = 0.5 * (w[i] + w[j]);
        x[i] = -xm;
        x[j] = xm;
        w[i] = wm;
        w[j] = wm;
    }
    if k % 2 == 1 {
        x[k / 2] = 0.0;
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    (x, w)
}

/// Nodes and weights with `int_0^inf f(u) e^-u du ~ sum w_k f(u_k)`.
pub fn gauss_laguerre_nodes(k: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(k >= 1, "need at least one node");
    let (x, mut w) = golub_welsch(
        (0..k).map(|i| (2 * i + 1) as f64).collect(),
        (1..k).map(|i| i as f64).collect(),
    );
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    (x, w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RuleKind {
    GaussHermite,
    GaussLaguerre,
}

/// Tensor-product rule over `q` dimensions: `K^q` nodes.
#[derive(Debug, Clone)]
pub struct QuadratureGrid {
    pub kind: RuleKind,
    pub k: usize,
    pub q: usize,
    /// Node `i` occupies `nodes[i*q..(i+1)*q]`.
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureGrid {
    pub fn tensor(kind: RuleKind, k: usize, q: usize) -> Self {
        let rule = cached_rule(kind, k);
        let (x, w) = (&rule.0, &rule.1);
        let total = k.pow(q as u32);
        let mut nodes = Vec::with_capacity(total * q);
        let mut weights = Vec::with_capacity(total);
        let mut idx = vec![0usize; q];
        for _ in 0..total {
            let mut wt = 1.0;
            for &i in &idx {
                nodes.push(x[i]);
                wt *= w[i];
            }
            weights.push(wt);
            for d in (0..q).rev() {
                idx[d] += 1;
                if idx[d] < k {
                    break;
                }
                idx[d] = 0;
            }
        }
        Self {
            kind,
            k,
            q,
            nodes,
            weights,
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Nodes per dimension used when none is given: 25 for `q <= 2`, 11 for
/// `q <= 4`, 5 beyond.
pub fn default_nodes(q: usize) -> usize {
    match q {
        0..=2 => 25,
        3..=4 => 11,
        _ => 5,
    }
}

/// Law of the error term inside the integrand. `Normal` replaces the model's
/// error law; it exists to check the machinery against exact results.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ErrorLaw {
    #[default]
    Model,
    Laplace,
    Normal,
}

/// Placement of the Hermite nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Centering {
    /// Nodes of `N(0, I)` mapped through `C`.
    Standard,
    /// Nodes shifted and scaled per cluster to the normal approximation of
    /// the posterior of `v`; the weights carry the density ratio.
    #[default]
    Posterior,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct QuadratureOptions {
    /// Nodes per dimension; [`default_nodes`] when `None`.
    pub nodes: Option<usize>,
    pub error_law: ErrorLaw,
    pub centering: Centering,
}

/// Numerically integrated log-likelihood of an NL or LL model.
///
/// LL is limited to scaled-identity and diagonal random-effect covariances;
/// use the MCEM fitter for correlated LL random effects.
pub fn integrated_loglik(
    data: &ClusteredData,
    spec: &ModelSpec,
    beta: &DVector<f64>,
    sigma1: &DMatrix<f64>,
    sigma2: f64,
    opts: &QuadratureOptions,
) -> Result<f64> {
    check_supported(spec)?;
    Integrator::new(data, spec.kind, sigma1, opts)?.loglik(data, beta, sigma2)
}

fn check_supported(spec: &ModelSpec) -> Result<()> {
    match spec.kind {
        ConvolutionKind::NL => Ok(()),
        ConvolutionKind::LL => match spec.cov_structure {
            CovStructure::ScaledIdentity | CovStructure::Diagonal => Ok(()),
            other => Err(Error::Unsupported(format!(
                "quadrature covers LL only with uncorrelated random effects \
                 (scaled_identity or diagonal), got {other}; use the mcem fitter"
            ))),
        },
        other => Err(Error::Unsupported(format!(
            "quadrature likelihood applies to NL and LL, got {other}; \
             use the mcem fitter (or the exact likelihood for NN)"
        ))),
    }
}

/// Log-likelihood by numerical integration for any kind and structure,
/// used to report likelihoods of fitted models. NN is integrated too; use
/// [`crate::lme::nn_loglik`] for the exact value.
pub fn marginal_loglik_numeric(
    data: &ClusteredData,
    kind: ConvolutionKind,
    beta: &DVector<f64>,
    sigma1: &DMatrix<f64>,
    sigma2: f64,
    opts: &QuadratureOptions,
) -> Result<f64> {
    Integrator::new(data, kind, sigma1, opts)?.loglik(data, beta, sigma2)
}

struct Integrator {
    random_laplace: bool,
    error_laplace: bool,
    centering: Centering,
    /// Hermite tensor nodes, `d x K^d` column-major, with `d = q` for normal
    /// errors and `d = q - 1` for Laplace errors.
    grid: DMatrix<f64>,
    ln_w_hermite: Vec<f64>,
    /// `|t|^2 / 2` per Hermite node.
    half_sq: Vec<f64>,
    laguerre: Option<(Vec<f64>, Vec<f64>)>,
    factor: DMatrix<f64>,
}

/// Node placement `v = m + L t`.
struct Placement {
    m: DVector<f64>,
    l: DMatrix<f64>,
    ln_det_l: f64,
}

impl Integrator {
    fn new(data: &ClusteredData, kind: ConvolutionKind, sigma1: &DMatrix<f64>, opts: &QuadratureOptions) -> Result<Self> {
        let q = data.q();
        if sigma1.nrows() != q || sigma1.ncols() != q {
            return Err(Error::Dimension {
                context: "Sigma1",
                expected: q,
                got: sigma1.nrows(),
            });
        }
        let k = opts.nodes.unwrap_or_else(|| default_nodes(q));
        if k == 0 {
            return Err(Error::domain("quadrature needs at least one node"));
        }
        let error_laplace = match opts.error_law {
            ErrorLaw::Model => kind.error_is_laplace(),
            ErrorLaw::Laplace => true,
            ErrorLaw::Normal => false,
        };
        let random_laplace = kind.random_effect_is_laplace();
        let factor = psd_factor(sigma1)?;
        // LN with normal errors integrates W only; the rest is exact
        let dims = if error_laplace {
            Some(q - 1)
        } else if !random_laplace {
            Some(q)
        } else {
            None
        };
        let (grid, ln_w_hermite, half_sq) = match dims {
            Some(d) => {
                let g = QuadratureGrid::tensor(RuleKind::GaussHermite, k, d);
                let t = DMatrix::from_column_slice(d, g.len(), &g.nodes);
                let half_sq = t.column_iter().map(|c| 0.5 * c.norm_squared()).collect();
                (t, g.weights.iter().map(|w| w.ln()).collect(), half_sq)
            }
            None => (DMatrix::zeros(0, 0), Vec::new(), Vec::new()),
        };
        let laguerre = random_laplace.then(|| {
            let rule = cached_rule(RuleKind::GaussLaguerre, k);
            (rule.0.clone(), rule.1.iter().map(|v| v.ln()).collect())
        });
        Ok(Self {
            random_laplace,
            error_laplace,
            centering: opts.centering,
            grid,
            ln_w_hermite,
            half_sq,
            laguerre,
            factor,
        })
    }

    fn loglik(&self, data: &ClusteredData, beta: &DVector<f64>, sigma2: f64) -> Result<f64> {
        if beta.len() != data.p() {
            return Err(Error::Dimension {
                context: "beta",
                expected: data.p(),
                got: beta.len(),
            });
        }
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::domain("sigma2 must be positive and finite"));
        }
        let parts: Vec<f64> = data
            .clusters()
            .par_iter()
            .map(|c| self.cluster(c, beta, sigma2))
            .collect::<Result<Vec<_>>>()?;
        // fixed summation order
        Ok(parts.iter().sum())
    }

    /// Normal approximation to the posterior of `v` for `b = s C v` and
    /// normal errors with variances `var`; identity for standard placement.
    fn place(&self, zc: &DMatrix<f64>, r: &DVector<f64>, var: &[f64], s: f64) -> Placement {
        let q = zc.ncols();
        let standard = Placement {
            m: DVector::zeros(q),
            l: DMatrix::identity(q, q),
            ln_det_l: 0.0,
        };
        if self.centering == Centering::Standard {
            return standard;
        }
        let mut prec = DMatrix::<f64>::identity(q, q);
        let mut rhs = DVector::<f64>::zeros(q);
        for j in 0..zc.nrows() {
            let inv = 1.0 / var[j];
            for a in 0..q {
                let za = zc[(j, a)] * inv;
                rhs[a] += s * za * r[j];
                for b in 0..q {
                    prec[(a, b)] += s * s * za * zc[(j, b)];
                }
            }
        }
        let Some(ch) = prec.cholesky() else {
            return standard;
        };
        let m = ch.solve(&rhs);
        // prec = R R', L = R^-T
        let r_low = ch.l();
        let Some(l) = r_low.transpose().solve_upper_triangular(&DMatrix::identity(q, q)) else {
            return standard;
        };
        let ln_det_l = -r_low.diagonal().iter().map(|x| x.ln()).sum::<f64>();
        Placement { m, l, ln_det_l }
    }

    fn cluster(&self, c: &Cluster, beta: &DVector<f64>, sigma2: f64) -> Result<f64> {
        let r = &c.y - &c.x * beta;
        let v = unit_or_known(c);
        if !self.error_laplace && self.random_laplace {
            return self.cluster_ln_exact(c, &r, &v, sigma2);
        }
        let scales: Vec<f64> = v.iter().map(|vj| sigma2 * vj.sqrt()).collect();
        let var: Vec<f64> = scales.iter().map(|s| s * s).collect();
        let zc = &c.z * &self.factor;
        let mut acc = LogSumExp::new();
        let mut kinks = Vec::with_capacity(c.len());
        let mut level = |ln_w_outer: f64, s: f64| {
            let pl = self.place(&zc, &r, &var, s);
            if self.error_laplace {
                self.laplace_level(&zc, &r, &scales, s, &pl, ln_w_outer, &mut kinks, &mut acc);
            } else {
                self.normal_level(&zc, &r, &scales, s, &pl, ln_w_outer, &mut acc);
            }
        };
        match &self.laguerre {
            None => level(0.0, 1.0),
            Some((wx, wl)) => {
                for (wi, lwi) in wx.iter().zip(wl) {
                    level(*lwi, wi.sqrt());
                }
            }
        }
        let out = acc.value();
        if out.is_finite() {
            Ok(out)
        } else {
            Err(Error::numeric(format!("cluster `{}` has zero integrated likelihood", c.id)))
        }
    }

    /// Normal errors: Hermite rule over all `q` directions.
    #[allow(clippy::too_many_arguments)]
    fn normal_level(
        &self,
        zc: &DMatrix<f64>,
        r: &DVector<f64>,
        scales: &[f64],
        s: f64,
        pl: &Placement,
        ln_w_outer: f64,
        acc: &mut LogSumExp,
    ) {
        let n = r.len();
        let konst = -scales.iter().map(|sc| sc.ln() + LN_SQRT_2PI).sum::<f64>();
        let mut v = &pl.l * &self.grid;
        for mut col in v.column_iter_mut() {
            col += &pl.m;
        }
        let proj = zc * &v * s;
        for (k, col) in proj.column_iter().enumerate() {
            let mut sum = 0.0;
            for j in 0..n {
                let e = (r[j] - col[j]) / scales[j];
                sum += 0.5 * e * e;
            }
            let ratio = -0.5 * v.column(k).norm_squared() + self.half_sq[k] + pl.ln_det_l;
            acc.add(ln_w_outer + self.ln_w_hermite[k] + ratio + konst - sum);
        }
    }

    /// Laplace errors: closed form along the first direction of `t`, Hermite
    /// rule over the others.
    #[allow(clippy::too_many_arguments)]
    fn laplace_level(
        &self,
        zc: &DMatrix<f64>,
        r: &DVector<f64>,
        scales: &[f64],
        s: f64,
        pl: &Placement,
        ln_w_outer: f64,
        kinks: &mut Vec<(f64, usize)>,
        acc: &mut LogSumExp,
    ) {
        let n = r.len();
        let q = zc.ncols();
        let coef: Vec<f64> = scales.iter().map(|sc| SQRT_2 / sc).collect();
        let konst = -scales.iter().map(|sc| (SQRT_2 * sc).ln()).sum::<f64>();
        let l = closed_form_direction(&pl.l, zc);
        let l0 = l.column(0);
        let len0 = l0.norm();
        let gamma: Vec<f64> = (0..n).map(|j| s * zc.row(j).dot(&l0.transpose()) / len0).collect();
        let rest = l.columns(1, q - 1);
        let mut alpha = vec![0.0; n];
        let mut sign = vec![0.0; n];
        for (k, t) in self.grid.column_iter().enumerate() {
            let cvec = &pl.m + rest * t;
            let mu = l0.dot(&cvec) / (len0 * len0);
            // residual along the closed-form direction: alpha_j - gamma_j u, u ~ N(0, 1)
            let mut a0 = 0.0;
            let mut b0 = 0.0;
            kinks.clear();
            for j in 0..n {
                let gj = gamma[j] * len0;
                alpha[j] = r[j] - s * zc.row(j).dot(&cvec.transpose()) + gj * mu;
                if gamma[j] != 0.0 {
                    sign[j] = gamma[j].signum();
                    a0 -= coef[j] * sign[j] * alpha[j];
                    b0 += coef[j] * sign[j] * gamma[j];
                    kinks.push((alpha[j] / gamma[j], j));
                } else {
                    a0 -= coef[j] * alpha[j].abs();
                }
            }
            kinks.sort_by(|x, y| x.0.total_cmp(&y.0));
            let mut seg = LogSumExp::new();
            let mut lo = f64::NEG_INFINITY;
            for &(pos, j) in kinks.iter() {
                seg.add(a0 + 0.5 * b0 * b0 + ln_normal_interval(lo - b0, pos - b0));
                a0 += 2.0 * coef[j] * sign[j] * alpha[j];
                b0 -= 2.0 * coef[j] * sign[j] * gamma[j];
                sign[j] = -sign[j];
                lo = pos;
            }
            seg.add(a0 + 0.5 * b0 * b0 + ln_normal_interval(lo - b0, f64::INFINITY));
            let ratio = 0.5 * len0 * len0 * mu * mu - 0.5 * cvec.norm_squared() + self.half_sq[k] + pl.ln_det_l - len0.ln();
            acc.add(ln_w_outer + self.ln_w_hermite[k] + ratio + konst + seg.value());
        }
    }

    /// Laplace random effect with normal errors: one-dimensional Laguerre rule
    /// over `W` with the exact normal likelihood given `W`.
    fn cluster_ln_exact(&self, c: &Cluster, r: &DVector<f64>, v: &[f64], sigma2: f64) -> Result<f64> {
        let n = c.len();
        let q = self.factor.ncols();
        let s2 = sigma2 * sigma2;
        let d: Vec<f64> = v.iter().map(|vj| s2 * vj).collect();
        let zc = &c.z * &self.factor;
        let mut m = DMatrix::zeros(q, q);
        let mut u = DVector::zeros(q);
        let mut rdr = 0.0;
        let mut logdet_d = 0.0;
        for j in 0..n {
            let dj = 1.0 / d[j];
            logdet_d += d[j].ln();
            rdr += r[j] * r[j] * dj;
            for a in 0..q {
                u[a] += zc[(j, a)] * r[j] * dj;
                for b in 0..q {
                    m[(a, b)] += zc[(j, a)] * zc[(j, b)] * dj;
                }
            }
        }
        let (wx, wl) = self.laguerre.as_ref().expect("Laplace random effect uses a Laguerre rule");
        let mut acc = LogSumExp::new();
        for (w, lw) in wx.iter().zip(wl) {
            let h = DMatrix::identity(q, q) + &m * *w;
            let ch = h
                .cholesky()
                .ok_or_else(|| Error::numeric("I + W C'Z'D^-1 Z C is not positive definite"))?;
            let logdet_h = 2.0 * ch.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
            let quad = rdr - w * u.dot(&ch.solve(&u));
            acc.add(lw - 0.5 * n as f64 * (2.0 * PI).ln() - 0.5 * (logdet_d + logdet_h) - 0.5 * quad);
        }
        Ok(acc.value())
    }
}

/// `L H` with `H` an orthogonal reflection whose first column is the unit
/// direction `d` farthest from being parallel to any kink hyperplane, i.e.
/// maximizing `min_j |a_j . d| / |a_j|` over the kink normals `a_j = L'C'z_j`.
fn closed_form_direction(l: &DMatrix<f64>, zc: &DMatrix<f64>) -> DMatrix<f64> {
    let q = l.ncols();
    if q == 1 {
        return l.clone();
    }
    let normals: Vec<DVector<f64>> = (0..zc.nrows())
        .filter_map(|j| {
            let a = l.transpose() * zc.row(j).transpose();
            let len = a.norm();
            (len > 0.0).then(|| a / len)
        })
        .collect();
    if normals.is_empty() {
        return l.clone();
    }
    let score = |d: &DVector<f64>| normals.iter().map(|a| a.dot(d).abs()).fold(f64::INFINITY, f64::min);
    let mut candidates: Vec<DVector<f64>> = (0..q).map(|i| DVector::from_fn(q, |r, _| f64::from(u8::from(r == i)))).collect();
    candidates.extend(normals.iter().cloned());
    for i in 0..normals.len() {
        for j in i + 1..normals.len() {
            for sum in [&normals[i] + &normals[j], &normals[i] - &normals[j]] {
                let len = sum.norm();
                if len > 1e-12 {
                    candidates.push(sum / len);
                }
            }
        }
    }
    let mut best = candidates[0].clone();
    let mut best_score = score(&best);
    for c in &candidates[1..] {
        let sc = score(c);
        if sc > best_score {
            best_score = sc;
            best = c.clone();
        }
    }
    // reflection mapping e_1 to best
    let mut w = -best;
    w[0] += 1.0;
    let ww = w.norm_squared();
    if ww < 1e-24 {
        return l.clone();
    }
    let h = DMatrix::identity(q, q) - &w * w.transpose() * (2.0 / ww);
    l * h
}

/// Streaming `log(sum exp(x_i))`.
struct LogSumExp {
    max: f64,
    sum: f64,
}

impl LogSumExp {
    fn new() -> Self {
        Self {
            max: f64::NEG_INFINITY,
            sum: 0.0,
        }
    }

    #[inline]
    fn add(&mut self, x: f64) {
        if x <= self.max {
            self.sum += (x - self.max).exp();
        } else if x.is_finite() {
            self.sum = self.sum * (self.max - x).exp() + 1.0;
            self.max = x;
        }
    }

    fn value(&self) -> f64 {
        self.max + self.sum.ln()
    }
}

#[derive(Debug, Clone)]
pub struct QuadratureFitConfig {
    pub options: QuadratureOptions,
    /// Extra Nelder-Mead runs from the best point with a randomized simplex.
    pub restarts: usize,
    pub max_iter: u64,
    pub sd_tolerance: f64,
    pub seed: u64,
    /// Standard errors from the finite-difference Hessian.
    pub hessian_se: bool,
}

impl Default for QuadratureFitConfig {
    fn default() -> Self {
        Self {
            options: QuadratureOptions::default(),
            restarts: 2,
            max_iter: 4000,
            sd_tolerance: 1e-8,
            seed: 1,
            hessian_se: true,
        }
    }
}

/// Maximizes [`integrated_loglik`] over `(beta, xi, ln sigma2)` starting
/// from the normal-normal fit.
pub fn fit_quadrature_ml(data: &ClusteredData, spec: &ModelSpec, cfg: &QuadratureFitConfig) -> Result<FitResult> {
    check_supported(spec)?;
    let cov = spec.cov_spec()?;
    let known = spec.residual_mode == ResidualMode::KnownVariances;
    let start = fit_lme(data, &spec.with_kind(ConvolutionKind::NN), &LmeConfig::default())?;
    let p = data.p();
    let m = cov.n_params();
    let mut theta0: Vec<f64> = start.beta.iter().chain(start.xi.iter()).copied().collect();
    if !known {
        theta0.push(start.sigma2.ln());
    }
    let unpack = |th: &[f64]| -> (DVector<f64>, Vec<f64>, f64) {
        let beta = DVector::from_column_slice(&th[..p]);
        let xi = th[p..p + m].to_vec();
        let s2 = if known { 1.0 } else { th[p + m].exp() };
        (beta, xi, s2)
    };
    let kind = spec.kind;
    let opts = cfg.options;
    let nll = |th: &[f64]| -> f64 {
        if th[p..].iter().any(|v| v.abs() > 30.0) {
            return f64::INFINITY;
        }
        let (beta, xi, s2) = unpack(th);
        let s1 = match cov.sigma1(&xi, s2) {
            Ok(s) => s,
            Err(_) => return f64::INFINITY,
        };
        match Integrator::new(data, kind, &s1, &opts).and_then(|ig| ig.loglik(data, &beta, s2)) {
            Ok(v) => -v,
            Err(_) => f64::INFINITY,
        }
    };
    let se0 = start.se_beta.clone().unwrap_or_else(|| DVector::from_element(p, 0.1));
    let mut steps: Vec<f64> = se0.iter().map(|s| (2.0 * s).max(0.05)).collect();
    steps.extend(std::iter::repeat(0.3).take(m));
    if !known {
        steps.push(0.2);
    }
    let mut nm = NelderMeadOptions {
        steps: steps.clone(),
        max_iter: cfg.max_iter,
        sd_tolerance: cfg.sd_tolerance,
    };
    let mut best = nelder_mead(&nll, &theta0, &nm)?;
    let mut converged = best.converged;
    let mut iterations = best.iterations;
    let mut rng = stream(cfg.seed, &[0x9a0d]);
    for _ in 0..cfg.restarts {
        nm.steps = steps
            .iter()
            .map(|s| {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                sign * s * rng.random_range(0.25..1.0)
            })
            .collect();
        let run = nelder_mead(&nll, &best.x, &nm)?;
        iterations += run.iterations;
        if run.f <= best.f {
            converged = run.converged || (converged && (best.f - run.f) < 1e-6);
            best = run;
        }
    }
    if let Some(pol) = bfgs_polish(&nll, &best.x, 100, 1e-5) {
        if pol.f <= best.f {
            best = pol;
        }
    }
    if !best.f.is_finite() || best.f >= 1e300 {
        return Err(Error::Optimizer("no finite likelihood value found".into()));
    }
    let (beta, xi, s2) = unpack(&best.x);
    let sigma1 = cov.sigma1(&xi, s2)?;
    let (se_beta, cov_beta, se_method) = if cfg.hessian_se {
        hessian_cov(&nll, &best.x, p)
    } else {
        (None, None, SeMethod::None)
    };
    Ok(FitResult {
        kind,
        method: FitMethod::Quadrature,
        structure: cov.structure(),
        residual_mode: spec.residual_mode,
        fixed_names: data.fixed_names().to_vec(),
        random_names: data.random_names().to_vec(),
        beta,
        sigma1,
        sigma2: s2,
        xi: DVector::from_vec(xi),
        loglik: -best.f,
        loglik_nodes: Some(opts.nodes.unwrap_or_else(|| default_nodes(data.q()))),
        se_beta,
        cov_beta,
        se_method,
        converged,
        iterations: iterations as usize,
        message: (!converged).then(|| "Nelder-Mead stopped at the iteration limit".to_string()),
    })
}

fn hessian_cov(
    nll: &dyn Fn(&[f64]) -> f64,
    x: &[f64],
    p: usize,
) -> (Option<DVector<f64>>, Option<DMatrix<f64>>, SeMethod) {
    let h = central_hessian(nll, x, 1e-4);
    let n = x.len();
    let hm = DMatrix::from_fn(n, n, |i, j| h[i][j]);
    match hm.cholesky() {
        Some(ch) => {
            let inv = ch.inverse();
            let cov = inv.view((0, 0), (p, p)).into_owned();
            let se = cov.diagonal().map(|v| v.max(0.0).sqrt());
            (Some(se), Some(cov), SeMethod::Hessian)
        }
        None => (None, None, SeMethod::None),
    }
}

/// Standard errors from resampling whole clusters.
#[derive(Debug, Clone)]
pub struct BootstrapResult {
    pub names: Vec<String>,
    pub se: DVector<f64>,
    /// Estimates of the kept replicates, in replicate order.
    pub estimates: Vec<DVector<f64>>,
    pub replicates: usize,
    pub dropped: usize,
}

/// Refits `fitter` on `replicates` resamples of the clusters. Clusters are put
/// in id order first, so the result does not depend on input order.
/// Non-converged or failed replicates are dropped; more than 20% dropped is an error.
pub fn block_bootstrap_se<F>(data: &ClusteredData, replicates: usize, seed: u64, fitter: F) -> Result<BootstrapResult>
where
    F: Fn(&ClusteredData) -> Result<FitResult> + Sync,
{
    if replicates < 2 {
        return Err(Error::domain("bootstrap needs at least 2 replicates"));
    }
    let canon = data.sorted_by_id();
    let m = canon.n_clusters();
    let outcomes: Vec<Option<(Vec<String>, DVector<f64>)>> = (0..replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream(seed, &[0xb007, b as u64]);
            let idx: Vec<usize> = (0..m).map(|_| rng.random_range(0..m)).collect();
            let sample = canon.select(&idx).ok()?;
            match fitter(&sample) {
                Ok(f) if f.converged => Some((f.theta_names(), f.theta())),
                _ => None,
            }
        })
        .collect();
    let dropped = outcomes.iter().filter(|o| o.is_none()).count();
    if dropped * 5 > replicates {
        return Err(Error::Optimizer(format!(
            "{dropped} of {replicates} bootstrap replicates failed to converge"
        )));
    }
    let kept: Vec<(Vec<String>, DVector<f64>)> = outcomes.into_iter().flatten().collect();
    if kept.len() < 2 {
        return Err(Error::Optimizer("fewer than two bootstrap replicates converged".into()));
    }
    let names = kept[0].0.clone();
    let estimates: Vec<DVector<f64>> = kept.into_iter().map(|(_, t)| t).collect();
    let k = estimates.len() as f64;
    let mean = estimates.iter().fold(DVector::zeros(names.len()), |a, t| a + t) / k;
    let var = estimates
        .iter()
        .fold(DVector::zeros(names.len()), |a: DVector<f64>, t| a + (t - &mean).map(|d| d * d))
        / (k - 1.0);
    Ok(BootstrapResult {
        names,
        se: var.map(f64::sqrt),
        estimates,
        replicates,
        dropped,
    })
}
