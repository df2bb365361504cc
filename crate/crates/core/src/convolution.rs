//! Marginal densities of the four normal/Laplace convolutions
//! `Y = e1 + e2` (random effect plus noise), their regression forms, and samplers.
//!
//! | kind | random effect `e1` | noise `e2` |
//! |------|--------------------|------------|
//! | NN   | normal             | normal     |
//! | NL   | normal             | Laplace    |
//! | LN   | Laplace            | normal     |
//! | LL   | Laplace            | Laplace    |
//!
//! In every case `var(Y) = sigma1^2 + sigma2^2`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use libm::erfc;

use crate::dist::{laplace_ln_pdf_unchecked, normal_ln_pdf_unchecked, sample_laplace_scale_mixture};
use crate::error::{check_scale, Error, Result};
use crate::integrate::integrate_real_line_with_error;
use crate::special::{ln_mills_ratio, std_normal_ln_pdf};

const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Below this relative rate gap the LL density uses the equal-rate expansion.
pub const LL_EQUAL_RATE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ConvolutionKind {
    NN,
    NL,
    LN,
    LL,
}

impl ConvolutionKind {
    pub const ALL: [ConvolutionKind; 4] = [Self::NN, Self::NL, Self::LN, Self::LL];

    pub fn random_effect_is_laplace(self) -> bool {
        matches!(self, Self::LN | Self::LL)
    }

    pub fn error_is_laplace(self) -> bool {
        matches!(self, Self::NL | Self::LL)
    }

    pub fn ln_pdf(self, y: f64, params: &ConvolutionParams) -> f64 {
        match self {
            Self::NN => nn_ln_pdf(y, params),
            Self::NL => nl_ln_pdf(y, params),
            Self::LN => ln_ln_pdf(y, params),
            Self::LL => ll_ln_pdf(y, params),
        }
    }

    pub fn pdf(self, y: f64, params: &ConvolutionParams) -> f64 {
        self.ln_pdf(y, params).exp()
    }
}

impl fmt::Display for ConvolutionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::NN => "NN",
            Self::NL => "NL",
            Self::LN => "LN",
            Self::LL => "LL",
        };
        f.write_str(s)
    }
}

impl FromStr for ConvolutionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "NN" => Ok(Self::NN),
            "NL" => Ok(Self::NL),
            "LN" => Ok(Self::LN),
            "LL" => Ok(Self::LL),
            other => Err(Error::domain(format!(
                "unknown convolution kind `{other}` (expected NN, NL, LN or LL)"
            ))),
        }
    }
}

/// Scales of the two components: `sigma1` for the random effect (may be 0),
/// `sigma2` for the noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvolutionParams {
    sigma1: f64,
    sigma2: f64,
}

impl ConvolutionParams {
    pub fn new(sigma1: f64, sigma2: f64) -> Result<Self> {
        if !(sigma1 >= 0.0 && sigma1.is_finite()) {
            return Err(Error::domain(format!(
                "sigma1 must be nonnegative and finite, got {sigma1}"
            )));
        }
        check_scale("sigma2", sigma2)?;
        Ok(Self { sigma1, sigma2 })
    }

    pub fn sigma1(&self) -> f64 {
        self.sigma1
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn variance(&self) -> f64 {
        self.sigma1 * self.sigma1 + self.sigma2 * self.sigma2
    }
}

pub fn nn_ln_pdf(y: f64, p: &ConvolutionParams) -> f64 {
    normal_ln_pdf_unchecked(y, 0.0, p.variance().sqrt())
}

pub fn nn_pdf(y: f64, p: &ConvolutionParams) -> f64 {
    nn_ln_pdf(y, p).exp()
}

/// `ln Phi(x)` for `x >= 0`.
fn ln_std_normal_cdf_upper(x: f64) -> f64 {
    (-0.5 * erfc(x / SQRT_2)).ln_1p()
}

#[inline]
fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// Normal(s_n) + Laplace(s_l) in log space. With `u = |y|/s_n` and
/// `k = sqrt(2) s_n / s_l` the density is
/// `phi(u) {R(k - u) + R(k + u)} / (sqrt(2) s_l)`; the first product is
/// rewritten as `exp(k^2/2 - k u) Phi(u - k)` once `u >= k` so that no huge
/// terms cancel.
fn normal_laplace_ln_pdf(y: f64, s_n: f64, s_l: f64) -> f64 {
    if s_n == 0.0 {
        return laplace_ln_pdf_unchecked(y, 0.0, s_l);
    }
    let u = y.abs() / s_n;
    let k = SQRT_2 * s_n / s_l;
    let ln_phi = std_normal_ln_pdf(u);
    let ln_a = if u >= k {
        0.5 * k * k - k * u + ln_std_normal_cdf_upper(u - k)
    } else {
        ln_phi + ln_mills_ratio(k - u)
    };
    let ln_b = ln_phi + ln_mills_ratio(k + u);
    log_add_exp(ln_a, ln_b) - (SQRT_2 * s_l).ln()
}

/// Normal random effect, Laplace noise.
pub fn nl_ln_pdf(y: f64, p: &ConvolutionParams) -> f64 {
    normal_laplace_ln_pdf(y, p.sigma1, p.sigma2)
}

pub fn nl_pdf(y: f64, p: &ConvolutionParams) -> f64 {
    nl_ln_pdf(y, p).exp()
}

/// Laplace random effect, normal noise: the NL shape with the scales swapped.
pub fn ln_ln_pdf(y: f64, p: &ConvolutionParams) -> f64 {
    if p.sigma1 == 0.0 {
        return normal_ln_pdf_unchecked(y, 0.0, p.sigma2);
    }
    normal_laplace_ln_pdf(y, p.sigma2, p.sigma1)
}

pub fn ln_pdf(y: f64, p: &ConvolutionParams) -> f64 {
    ln_ln_pdf(y, p).exp()
}

/// Laplace + Laplace with rates `s_i = sqrt(2)/sigma_i`:
///
/// * equal rates: `s/4 (1 + s|y|) exp(-s|y|)`
/// * otherwise, `kappa = s1/s2`:
///   `kappa/(2 kappa^2 - 2) {s1 exp(-s2|y|) - s2 exp(-s1|y|)}`
///
/// The unequal branch is evaluated as
/// `s_hi s_lo/(2(s_hi+s_lo)) exp(-s_lo a) (1 + s_lo (1 - exp(-d a))/d)` with
/// `d = s_hi - s_lo`, which has no cancellation.
pub fn ll_ln_pdf(y: f64, p: &ConvolutionParams) -> f64 {
    if p.sigma1 == 0.0 {
        return laplace_ln_pdf_unchecked(y, 0.0, p.sigma2);
    }
    let a = y.abs();
    let s1 = SQRT_2 / p.sigma1;
    let s2 = SQRT_2 / p.sigma2;
    let (hi, lo) = if s1 >= s2 { (s1, s2) } else { (s2, s1) };
    let d = hi - lo;
    if d == 0.0 {
        let s = lo;
        return (0.25 * s).ln() + (s * a).ln_1p() - s * a;
    }
    // (1 - exp(-d a)) / d
    let ratio = if d / lo < LL_EQUAL_RATE_TOL {
        a - 0.5 * d * a * a
    } else {
        -(-d * a).exp_m1() / d
    };
    (hi * lo / (2.0 * (hi + lo))).ln() - lo * a + (lo * ratio).ln_1p()
}

pub fn ll_pdf(y: f64, p: &ConvolutionParams) -> f64 {
    ll_ln_pdf(y, p).exp()
}

/// Effective random-effect scale `sqrt(z' Sigma1 z)` of a regression row.
pub fn projected_scale(z: &DVector<f64>, sigma1: &DMatrix<f64>) -> Result<f64> {
    if sigma1.nrows() != z.len() || sigma1.ncols() != z.len() {
        return Err(Error::Dimension {
            context: "Sigma1 vs z",
            expected: z.len(),
            got: sigma1.nrows(),
        });
    }
    let v = (z.transpose() * sigma1 * z)[(0, 0)];
    if v < -1e-12 {
        return Err(Error::domain("z' Sigma1 z is negative; Sigma1 is not nonnegative definite"));
    }
    Ok(v.max(0.0).sqrt())
}

/// Marginal density of `y = x'beta + z'e1 + e2` under `kind`. The random
/// effect enters only through `sigma1 = sqrt(z' Sigma1 z)`, because linear
/// combinations of multivariate normal or Laplace coordinates stay in the
/// same family.
pub fn regression_marginal_pdf(
    y: f64,
    kind: ConvolutionKind,
    x: &DVector<f64>,
    z: &DVector<f64>,
    beta: &DVector<f64>,
    sigma1: &DMatrix<f64>,
    sigma2: f64,
) -> Result<f64> {
    if x.len() != beta.len() {
        return Err(Error::Dimension {
            context: "x vs beta",
            expected: beta.len(),
            got: x.len(),
        });
    }
    let params = ConvolutionParams::new(projected_scale(z, sigma1)?, sigma2)?;
    Ok(kind.pdf(y - x.dot(beta), &params))
}

/// Draws `e1 + e2` with independent components of the requested laws.
pub fn sample_convolution<R: Rng + ?Sized>(kind: ConvolutionKind, p: &ConvolutionParams, rng: &mut R) -> f64 {
    let first = if kind.random_effect_is_laplace() {
        sample_laplace_scale_mixture(0.0, p.sigma1, rng)
    } else {
        p.sigma1 * rng.sample::<f64, _>(StandardNormal)
    };
    let second = if kind.error_is_laplace() {
        sample_laplace_scale_mixture(0.0, p.sigma2, rng)
    } else {
        p.sigma2 * rng.sample::<f64, _>(StandardNormal)
    };
    first + second
}

/// Reference value of `(f * g)(y) = integral f(y - u) g(u) du` by adaptive
/// quadrature, independent of the closed forms. `scale` is the spread of the
/// narrower component; kinks are assumed at `u = 0` and `u = y`.
pub fn numeric_convolution_oracle<F, G>(f: F, g: G, y: f64, scale: f64) -> Result<f64>
where
    F: Fn(f64) -> f64,
    G: Fn(f64) -> f64,
{
    let out = integrate_real_line_with_error(|u| f(y - u) * g(u), &[0.0, y], scale, 1e-12);
    if !out.value.is_finite() || out.error_estimate > 1e-9 {
        return Err(Error::numeric(format!(
            "convolution quadrature did not converge at y = {y}: estimate {}, error {}",
            out.value, out.error_estimate
        )));
    }
    Ok(out.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{laplace_pdf, normal_pdf};
    use crate::integrate::moments;

    fn params(a: f64, b: f64) -> ConvolutionParams {
        ConvolutionParams::new(a, b).unwrap()
    }

    fn breakpoints(kind: ConvolutionKind) -> Vec<f64> {
        if kind == ConvolutionKind::NN {
            vec![]
        } else {
            vec![0.0]
        }
    }

    #[test]
    fn nn_values() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((nn_pdf(0.0, &params(h, h)) - 0.3989422804014327).abs() < 1e-15);
        for y in [-2.0, 0.0, 0.3, 5.0] {
            assert_eq!(nn_pdf(y, &params(0.0, 1.7)), normal_pdf(y, 0.0, 1.7).unwrap());
        }
    }

    #[test]
    fn zero_sigma1_limits() {
        for y in [-3.0, 0.0, 0.2, 7.0] {
            let p = params(0.0, 1.3);
            assert!((nl_pdf(y, &p) - laplace_pdf(y, 0.0, 1.3).unwrap()).abs() < 1e-15);
            assert!((ln_pdf(y, &p) - normal_pdf(y, 0.0, 1.3).unwrap()).abs() < 1e-15);
            assert!((ll_pdf(y, &p) - laplace_pdf(y, 0.0, 1.3).unwrap()).abs() < 1e-15);
        }
    }

    #[test]
    fn nl_tiny_random_effect_approaches_laplace() {
        for y in [0.5, 3.0, 12.0] {
            let got = nl_pdf(y, &params(1e-9, 2.0));
            let want = laplace_pdf(y, 0.0, 2.0).unwrap();
            assert!(((got - want) / want).abs() < 1e-6, "y={y}: {got} vs {want}");
        }
    }

    #[test]
    fn nl_is_finite_far_in_the_tail() {
        let p = params(0.5, 1.0);
        let v = nl_ln_pdf(60.0, &p);
        assert!(v.is_finite());
        // Laplace tail dominates: slope -sqrt(2)/sigma2.
        let slope = nl_ln_pdf(61.0, &p) - v;
        assert!((slope + SQRT_2).abs() < 1e-6);
    }

    #[test]
    fn ln_is_nl_with_swapped_scales() {
        for (a, b) in [(0.3, 2.0), (1.0, 1.0), (4.0, 0.5)] {
            for y in [-4.0, -0.1, 0.0, 2.5, 9.0] {
                assert_eq!(ln_pdf(y, &params(a, b)), nl_pdf(y, &params(b, a)));
            }
        }
    }

    #[test]
    fn ll_equal_rate_peak() {
        let s = SQRT_2;
        assert!((ll_pdf(0.0, &params(1.0, 1.0)) - s / 4.0).abs() < 1e-15);
        assert!((ll_pdf(0.0, &params(1.0, 1.0)) - 0.3535533905932738).abs() < 1e-15);
    }

    #[test]
    fn ll_branches_are_continuous() {
        // Series branch at sigma2/sigma1 = 1 + 1e-7 against 30-digit evaluations
        // of the two-rate formula.
        let near = params(1.0, 1.0 + 1e-7);
        let reference = [
            (0.0, 0.35355337291560511642),
            (0.4, 0.31440210088484703656),
            (1.0, 0.20751311120610661357),
            (3.0, 0.026634816795526042502),
            (8.0, 0.000053132825066598521191),
        ];
        for (y, want) in reference {
            assert!((ll_pdf(y, &near) - want).abs() < 1e-8);
        }
        // Either side of the switch.
        let below = params(1.0, 1.0 + 0.999_999e-6);
        let above = params(1.0, 1.0 + 1.000_001e-6);
        for (y, _) in reference {
            assert!((ll_pdf(y, &below) - ll_pdf(y, &above)).abs() < 1e-11);
        }
        // Equal-rate branch is the limit.
        for (y, _) in reference {
            assert!((ll_pdf(y, &params(1.0, 1.0)) - ll_pdf(y, &near)).abs() < 1e-7);
        }
    }

    #[test]
    fn ll_unequal_matches_printed_formula() {
        let p = params(1.0, 2.0);
        let (s1, s2) = (SQRT_2, SQRT_2 / 2.0);
        let k: f64 = s1 / s2;
        for y in [0.0f64, 0.7, 2.0, 5.0] {
            let a = y.abs();
            let printed = k / (2.0 * k * k - 2.0) * (s1 * (-s2 * a).exp() - s2 * (-s1 * a).exp());
            assert!((ll_pdf(y, &p) - printed).abs() < 1e-15);
        }
    }

    #[test]
    fn variances_by_quadrature() {
        for kind in ConvolutionKind::ALL {
            for (a, b) in [(1.0, 2.0), (2.0, 1.0)] {
                let p = params(a, b);
                let (mass, mean, var) = moments(|y| kind.pdf(y, &p), &breakpoints(kind), 1.0);
                assert!((mass - 1.0).abs() < 1e-9, "{kind} mass {mass}");
                assert!(mean.abs() < 1e-9);
                assert!(((var - 5.0) / 5.0).abs() < 1e-6, "{kind} var {var}");
            }
        }
    }

    #[test]
    fn even_and_unimodal() {
        let p = params(0.8, 1.3);
        for kind in ConvolutionKind::ALL {
            let mut prev = kind.pdf(0.0, &p);
            for i in 1..400 {
                let y = i as f64 * 0.05;
                let v = kind.pdf(y, &p);
                assert_eq!(v, kind.pdf(-y, &p));
                assert!(v <= prev, "{kind} not unimodal at {y}");
                prev = v;
            }
        }
    }

    #[test]
    fn tail_ordering_at_unit_variance() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let p = params(h, h);
        let (nn, nl, ll) = (nn_pdf(4.0, &p), nl_pdf(4.0, &p), ll_pdf(4.0, &p));
        assert!(ll >= nl && nl >= nn, "ll={ll} nl={nl} nn={nn}");
    }

    #[test]
    fn oracle_reproduces_normal_sum() {
        let v = numeric_convolution_oracle(
            |t| normal_pdf(t, 0.0, 1.0).unwrap(),
            |t| normal_pdf(t, 0.0, 1.0).unwrap(),
            0.0,
            1.0,
        )
        .unwrap();
        assert!((v - 0.28209479177387814).abs() < 1e-12);
    }

    #[test]
    fn oracle_with_narrow_kernel_returns_the_density() {
        let eps = 1e-4;
        for y in [-1.0, 0.3, 2.0] {
            let v = numeric_convolution_oracle(
                |t| laplace_pdf(t, 0.0, 1.0).unwrap(),
                |t| normal_pdf(t, 0.0, eps).unwrap(),
                y,
                eps,
            )
            .unwrap();
            assert!((v - laplace_pdf(y, 0.0, 1.0).unwrap()).abs() < 1e-6);
        }
    }

    #[test]
    fn regression_form_dispatch() {
        let x = DVector::from_vec(vec![1.0, 0.5]);
        let z = DVector::from_vec(vec![1.0, 0.0]);
        let beta = DVector::from_vec(vec![0.0, 0.0]);
        let sig = DMatrix::identity(2, 2);
        for kind in ConvolutionKind::ALL {
            let a = regression_marginal_pdf(0.4, kind, &x, &z, &beta, &sig, 1.5).unwrap();
            assert_eq!(a, kind.pdf(0.4, &params(1.0, 1.5)));
        }
        let beta = DVector::from_vec(vec![0.7, -1.2]);
        let sig = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]);
        let z = DVector::from_vec(vec![1.0, 0.4]);
        let shift = x.dot(&beta);
        for kind in ConvolutionKind::ALL {
            for y in [-1.0, 0.0, 2.2] {
                let shifted = regression_marginal_pdf(y + shift, kind, &x, &z, &beta, &sig, 2.0).unwrap();
                let base =
                    regression_marginal_pdf(y, kind, &x, &z, &DVector::zeros(2), &sig, 2.0).unwrap();
                assert!((shifted - base).abs() < 1e-14);
            }
        }
        let nn = regression_marginal_pdf(1.0, ConvolutionKind::NN, &x, &z, &beta, &sig, 2.0).unwrap();
        let zsz = (z.transpose() * &sig * &z)[(0, 0)];
        let want = normal_pdf(1.0, shift, (zsz + 4.0).sqrt()).unwrap();
        assert!((nn - want).abs() < 1e-15);
        assert!(regression_marginal_pdf(1.0, ConvolutionKind::NN, &z, &x, &DVector::zeros(3), &sig, 2.0).is_err());
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("ll".parse::<ConvolutionKind>().unwrap(), ConvolutionKind::LL);
        assert!("NX".parse::<ConvolutionKind>().is_err());
        assert_eq!(ConvolutionKind::LN.to_string(), "LN");
    }
}
