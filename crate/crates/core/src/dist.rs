//! Univariate normal and Laplace densities, the zero-centred multivariate
//! Laplace law, and their samplers.
//!
//! Scales follow the standard-deviation convention: a `Laplace(mu, sigma)`
//! variate has variance `sigma^2`, so its rate is `sqrt(2)/sigma`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Exp1, StandardNormal};

use crate::error::{check_scale, Error, Result};
use crate::special::{ln_bessel_k, LN_SQRT_2PI};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const LN_2: f64 = std::f64::consts::LN_2;

pub fn laplace_pdf(t: f64, mu: f64, sigma: f64) -> Result<f64> {
    check_scale("sigma", sigma)?;
    Ok(laplace_ln_pdf_unchecked(t, mu, sigma).exp())
}

pub fn laplace_ln_pdf(t: f64, mu: f64, sigma: f64) -> Result<f64> {
    check_scale("sigma", sigma)?;
    Ok(laplace_ln_pdf_unchecked(t, mu, sigma))
}

#[inline]
pub(crate) fn laplace_ln_pdf_unchecked(t: f64, mu: f64, sigma: f64) -> f64 {
    -SQRT_2 * (t - mu).abs() / sigma - (SQRT_2 * sigma).ln()
}

pub fn normal_pdf(t: f64, mu: f64, sigma: f64) -> Result<f64> {
    check_scale("sigma", sigma)?;
    Ok(normal_ln_pdf_unchecked(t, mu, sigma).exp())
}

pub fn normal_ln_pdf(t: f64, mu: f64, sigma: f64) -> Result<f64> {
    check_scale("sigma", sigma)?;
    Ok(normal_ln_pdf_unchecked(t, mu, sigma))
}

#[inline]
pub(crate) fn normal_ln_pdf_unchecked(t: f64, mu: f64, sigma: f64) -> f64 {
    let z = (t - mu) / sigma;
    -0.5 * z * z - LN_SQRT_2PI - sigma.ln()
}

/// Draws `mu + sigma * sqrt(E) * Z` with `E ~ Exp(1)` and `Z ~ N(0, 1)`,
/// which is distributed `Laplace(mu, sigma)`.
pub fn sample_laplace_scale_mixture<R: Rng + ?Sized>(mu: f64, sigma: f64, rng: &mut R) -> f64 {
    let e: f64 = rng.sample(Exp1);
    let z: f64 = rng.sample(StandardNormal);
    mu + sigma * e.sqrt() * z
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnivariateLaplace {
    mu: f64,
    sigma: f64,
}

impl UnivariateLaplace {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        check_scale("sigma", sigma)?;
        if !mu.is_finite() {
            return Err(Error::domain(format!("mu must be finite, got {mu}")));
        }
        Ok(Self { mu, sigma })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn variance(&self) -> f64 {
        self.sigma * self.sigma
    }

    pub fn pdf(&self, t: f64) -> f64 {
        self.ln_pdf(t).exp()
    }

    pub fn ln_pdf(&self, t: f64) -> f64 {
        laplace_ln_pdf_unchecked(t, self.mu, self.sigma)
    }

    pub fn cdf(&self, t: f64) -> f64 {
        let z = SQRT_2 * (t - self.mu) / self.sigma;
        if z < 0.0 {
            0.5 * z.exp()
        } else {
            1.0 - 0.5 * (-z).exp()
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        sample_laplace_scale_mixture(self.mu, self.sigma, rng)
    }
}

/// Zero-centred multivariate Laplace distribution `L_q(0, Sigma)`.
///
/// Density `2 (2 pi)^(-q/2) |Sigma|^(-1/2) (m/2)^(w/2) K_w(sqrt(2 m))` with
/// `m = t' Sigma^-1 t` and `w = (2 - q)/2`. The covariance equals `Sigma`.
/// Samples are `sqrt(W) V` with `W ~ Exp(1)` and `V ~ N_q(0, Sigma)`.
#[derive(Debug, Clone)]
pub struct MultivariateLaplace {
    sigma: DMatrix<f64>,
    /// Lower factor `F` with `F F' = Sigma` (Cholesky, or eigen square root when singular).
    factor: DMatrix<f64>,
    /// `Sigma^-1` and `ln |Sigma|`, present only when Sigma is positive definite.
    precision: Option<(DMatrix<f64>, f64)>,
}

impl MultivariateLaplace {
    pub fn new(sigma: DMatrix<f64>) -> Result<Self> {
        let q = sigma.nrows();
        if q == 0 || sigma.ncols() != q {
            return Err(Error::domain(format!(
                "Sigma must be a non-empty square matrix, got {}x{}",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        let scale = sigma.amax().max(1.0);
        for i in 0..q {
            for j in 0..i {
                if (sigma[(i, j)] - sigma[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::domain("Sigma must be symmetric"));
                }
            }
        }
        match sigma.clone().cholesky() {
            Some(ch) => {
                let l = ch.l();
                let ln_det = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
                let inv = ch.inverse();
                Ok(Self {
                    sigma,
                    factor: l,
                    precision: Some((inv, ln_det)),
                })
            }
            None => {
                let eig = sigma.clone().symmetric_eigen();
                if eig.eigenvalues.iter().any(|&v| v < -1e-10 * scale) {
                    return Err(Error::domain("Sigma must be nonnegative definite"));
                }
                let root = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
                let factor = &eig.eigenvectors * root;
                Ok(Self {
                    sigma,
                    factor,
                    precision: None,
                })
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// Log density. At `t = 0` with `q >= 2` the density is unbounded and
    /// `+inf` is returned; likelihood code never evaluates that point.
    pub fn ln_pdf(&self, t: &DVector<f64>) -> Result<f64> {
        let q = self.dim();
        if t.len() != q {
            return Err(Error::Dimension {
                context: "multivariate Laplace argument",
                expected: q,
                got: t.len(),
            });
        }
        let (inv, ln_det) = self
            .precision
            .as_ref()
            .ok_or_else(|| Error::domain("density requires a positive definite Sigma"))?;
        let m = (t.transpose() * inv * t)[(0, 0)].max(0.0);
        let qf = q as f64;
        let omega = (2.0 - qf) / 2.0;
        if m == 0.0 {
            return Ok(match q {
                1 => -0.5 * ln_det - 0.5 * LN_2,
                _ => f64::INFINITY,
            });
        }
        let arg = (2.0 * m).sqrt();
        Ok(LN_2 - qf * LN_SQRT_2PI - 0.5 * ln_det
            + 0.5 * omega * (0.5 * m).ln()
            + ln_bessel_k(omega, arg))
    }

    pub fn pdf(&self, t: &DVector<f64>) -> Result<f64> {
        Ok(self.ln_pdf(t)?.exp())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let w: f64 = rng.sample(Exp1);
        sample_mv_normal_with_factor(&self.factor, rng) * w.sqrt()
    }
}

/// Density of `L_q(0, Sigma)` at `t`; see [`MultivariateLaplace`].
pub fn mv_laplace_pdf(t: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
    MultivariateLaplace::new(sigma.clone())?.pdf(t)
}

/// One draw `sqrt(W) V`, `W ~ Exp(1)`, `V ~ N_q(0, Sigma)`.
pub fn sample_mv_laplace<R: Rng + ?Sized>(sigma: &DMatrix<f64>, rng: &mut R) -> Result<DVector<f64>> {
    Ok(MultivariateLaplace::new(sigma.clone())?.sample(rng))
}

pub(crate) fn sample_mv_normal_with_factor<R: Rng + ?Sized>(
    factor: &DMatrix<f64>,
    rng: &mut R,
) -> DVector<f64> {
    let z = DVector::from_fn(factor.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
    factor * z
}
