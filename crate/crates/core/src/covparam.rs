//! Structured random-effect covariance matrices and their unrestricted
//! parameterization `xi`.
//!
//! The map works on the relative covariance `S = Sigma1 / sigma2^2`. For the
//! general structure `xi` holds the row-major upper triangle of the symmetric
//! matrix `A = log(S) / 2`, so `S = exp(2 A) = U'U` with `U = exp(A)`. Every
//! finite `xi` gives a positive definite `S`.
//!
//! | structure          | m          | xi                                            |
//! |--------------------|------------|-----------------------------------------------|
//! | ScaledIdentity     | 1          | `log(s)/2` for `S = s I`                      |
//! | Diagonal           | q          | `log(s_jj)/2`                                 |
//! | CompoundSymmetric  | 2          | `log(v)/2`, scaled logit of the correlation   |
//! | GeneralSpd         | q(q+1)/2   | upper triangle of `log(S)/2`                  |

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_scale, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovStructure {
    ScaledIdentity,
    Diagonal,
    CompoundSymmetric,
    GeneralSpd,
}

impl fmt::Display for CovStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ScaledIdentity => "scaled_identity",
            Self::Diagonal => "diagonal",
            Self::CompoundSymmetric => "compound_symmetric",
            Self::GeneralSpd => "general_spd",
        })
    }
}

impl FromStr for CovStructure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "scaled_identity" | "identity" => Ok(Self::ScaledIdentity),
            "diagonal" | "diag" => Ok(Self::Diagonal),
            "compound_symmetric" | "cs" => Ok(Self::CompoundSymmetric),
            "general_spd" | "general" | "spd" | "unstructured" => Ok(Self::GeneralSpd),
            other => Err(Error::domain(format!(
                "unknown covariance structure `{other}` \
                 (expected scaled_identity, diagonal, compound_symmetric or general_spd)"
            ))),
        }
    }
}

/// A covariance structure together with its dimension `q`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovSpec {
    structure: CovStructure,
    dim: usize,
}

impl CovSpec {
    pub fn new(structure: CovStructure, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::domain("random-effect dimension must be at least 1"));
        }
        if structure == CovStructure::CompoundSymmetric && dim < 2 {
            return Err(Error::domain(
                "compound symmetry needs at least two random effects; use scaled_identity for q = 1",
            ));
        }
        Ok(Self { structure, dim })
    }

    pub fn structure(&self) -> CovStructure {
        self.structure
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of free parameters `m`.
    pub fn n_params(&self) -> usize {
        let q = self.dim;
        match self.structure {
            CovStructure::ScaledIdentity => 1,
            CovStructure::Diagonal => q,
            CovStructure::CompoundSymmetric => 2,
            CovStructure::GeneralSpd => q * (q + 1) / 2,
        }
    }

    fn check_len(&self, xi: &[f64]) -> Result<()> {
        if xi.len() != self.n_params() {
            return Err(Error::Dimension {
                context: "xi",
                expected: self.n_params(),
                got: xi.len(),
            });
        }
        Ok(())
    }

    /// Factor `B` with `B B' = S(xi)`. Singular values of `B` are
    /// `exp` of finite numbers, so `B` always has full rank.
    pub fn relative_factor(&self, xi: &[f64]) -> Result<DMatrix<f64>> {
        self.check_len(xi)?;
        let q = self.dim;
        Ok(match self.structure {
            CovStructure::ScaledIdentity => DMatrix::identity(q, q) * xi[0].exp(),
            CovStructure::Diagonal => DMatrix::from_diagonal(&DVector::from_iterator(
                q,
                xi.iter().map(|x| x.exp()),
            )),
            CovStructure::CompoundSymmetric => {
                // eigenvalues v(1 + (q-1) rho) along 1/sqrt(q), v(1 - rho) on its complement
                let v = (2.0 * xi[0]).exp();
                let (one_minus, one_plus) = cs_spectrum(xi[1], q);
                let qf = q as f64;
                let a = (v * one_minus).sqrt();
                let b = (v * one_plus).sqrt();
                // B = a (I - J/q) + b J/q, symmetric square root
                DMatrix::from_fn(q, q, |i, j| {
                    let jq = 1.0 / qf;
                    let id = if i == j { 1.0 } else { 0.0 };
                    a * (id - jq) + b * jq
                })
            }
            CovStructure::GeneralSpd => {
                let a = symmetric_from_upper(xi, q);
                let eig = a.symmetric_eigen();
                let d = eig.eigenvalues.map(f64::exp);
                &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
            }
        })
    }

    /// Relative covariance `S = Sigma1 / sigma2^2`.
    pub fn relative_cov(&self, xi: &[f64]) -> Result<DMatrix<f64>> {
        let q = self.dim;
        Ok(match self.structure {
            CovStructure::ScaledIdentity => {
                self.check_len(xi)?;
                DMatrix::identity(q, q) * (2.0 * xi[0]).exp()
            }
            CovStructure::Diagonal => {
                self.check_len(xi)?;
                DMatrix::from_diagonal(&DVector::from_iterator(
                    q,
                    xi.iter().map(|x| (2.0 * x).exp()),
                ))
            }
            CovStructure::CompoundSymmetric => {
                self.check_len(xi)?;
                let v = (2.0 * xi[0]).exp();
                let rho = cs_rho(xi[1], q);
                DMatrix::from_fn(q, q, |i, j| if i == j { v } else { v * rho })
            }
            CovStructure::GeneralSpd => {
                let b = self.relative_factor(xi)?;
                let s = &b * b.transpose();
                symmetrize(s)
            }
        })
    }

    /// Inverse of [`CovSpec::relative_cov`].
    pub fn xi_from_relative(&self, s: &DMatrix<f64>) -> Result<DVector<f64>> {
        let q = self.dim;
        if s.nrows() != q || s.ncols() != q {
            return Err(Error::Dimension {
                context: "relative covariance",
                expected: q,
                got: s.nrows(),
            });
        }
        let scale = s.amax();
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(singular_error());
        }
        let tol = 1e-8 * scale;
        for i in 0..q {
            for j in 0..i {
                if (s[(i, j)] - s[(j, i)]).abs() > tol {
                    return Err(Error::domain("covariance matrix must be symmetric"));
                }
            }
        }
        match self.structure {
            CovStructure::ScaledIdentity => {
                let v = s.diagonal().mean();
                let fits = (0..q).all(|i| {
                    (0..q).all(|j| {
                        let want = if i == j { v } else { 0.0 };
                        (s[(i, j)] - want).abs() <= tol
                    })
                });
                if !fits {
                    return Err(not_representable(self.structure));
                }
                if v <= 0.0 {
                    return Err(singular_error());
                }
                Ok(DVector::from_element(1, 0.5 * v.ln()))
            }
            CovStructure::Diagonal => {
                let off_ok = (0..q).all(|i| (0..q).all(|j| i == j || s[(i, j)].abs() <= tol));
                if !off_ok {
                    return Err(not_representable(self.structure));
                }
                if s.diagonal().iter().any(|&d| d <= 0.0) {
                    return Err(singular_error());
                }
                Ok(s.diagonal().map(|d| 0.5 * d.ln()))
            }
            CovStructure::CompoundSymmetric => {
                let v = s.diagonal().mean();
                let mut off = 0.0;
                for i in 0..q {
                    for j in 0..q {
                        if i != j {
                            off += s[(i, j)];
                        }
                    }
                }
                off /= (q * (q - 1)) as f64;
                let fits = (0..q).all(|i| {
                    (0..q).all(|j| {
                        let want = if i == j { v } else { off };
                        (s[(i, j)] - want).abs() <= tol
                    })
                });
                if !fits {
                    return Err(not_representable(self.structure));
                }
                if v <= 0.0 {
                    return Err(singular_error());
                }
                let rho = off / v;
                let lo = -1.0 / (q as f64 - 1.0);
                if !(rho > lo && rho < 1.0) {
                    return Err(singular_error());
                }
                let p = (rho - lo) / (1.0 - lo);
                Ok(DVector::from_vec(vec![0.5 * v.ln(), (p / (1.0 - p)).ln()]))
            }
            CovStructure::GeneralSpd => {
                let eig = symmetrize(s.clone()).symmetric_eigen();
                let min = eig.eigenvalues.min();
                if min <= 1e-14 * scale {
                    return Err(singular_error());
                }
                let half_log = eig.eigenvalues.map(|l| 0.5 * l.ln());
                let a = &eig.eigenvectors * DMatrix::from_diagonal(&half_log) * eig.eigenvectors.transpose();
                let mut xi = Vec::with_capacity(self.n_params());
                for i in 0..q {
                    for j in i..q {
                        xi.push(0.5 * (a[(i, j)] + a[(j, i)]));
                    }
                }
                Ok(DVector::from_vec(xi))
            }
        }
    }

    pub fn sigma1(&self, xi: &[f64], sigma2: f64) -> Result<DMatrix<f64>> {
        check_scale("sigma2", sigma2)?;
        Ok(self.relative_cov(xi)? * (sigma2 * sigma2))
    }

    pub fn xi(&self, sigma1: &DMatrix<f64>, sigma2: f64) -> Result<DVector<f64>> {
        check_scale("sigma2", sigma2)?;
        self.xi_from_relative(&(sigma1 / (sigma2 * sigma2)))
    }
}

/// `Sigma1` from `xi`; total for any finite `xi` of the right length.
pub fn xi_to_sigma1(xi: &[f64], spec: &CovSpec, sigma2: f64) -> Result<DMatrix<f64>> {
    spec.sigma1(xi, sigma2)
}

/// `xi` from `Sigma1`; fails when `Sigma1` is singular or does not have the
/// requested structure.
pub fn sigma1_to_xi(sigma1: &DMatrix<f64>, spec: &CovSpec, sigma2: f64) -> Result<DVector<f64>> {
    spec.xi(sigma1, sigma2)
}

fn cs_rho(t: f64, q: usize) -> f64 {
    let lo = -1.0 / (q as f64 - 1.0);
    lo + (1.0 - lo) * sigmoid(t)
}

/// `(1 - rho, 1 + (q-1) rho)` computed without cancellation near the bounds.
fn cs_spectrum(t: f64, q: usize) -> (f64, f64) {
    let qm1 = q as f64 - 1.0;
    let lo = -1.0 / qm1;
    let p = sigmoid(t);
    let pc = sigmoid(-t);
    // 1 - rho = (1 - lo)(1 - p);  1 + (q-1) rho = (q-1)(1 - lo) p
    ((1.0 - lo) * pc, qm1 * (1.0 - lo) * p)
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn symmetric_from_upper(xi: &[f64], q: usize) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(q, q);
    let mut k = 0;
    for i in 0..q {
        for j in i..q {
            a[(i, j)] = xi[k];
            a[(j, i)] = xi[k];
            k += 1;
        }
    }
    a
}

fn symmetrize(s: DMatrix<f64>) -> DMatrix<f64> {
    let t = s.transpose();
    (s + t) * 0.5
}

fn not_representable(structure: CovStructure) -> Error {
    Error::domain(format!("matrix does not have {structure} structure"))
}

fn singular_error() -> Error {
    Error::domain(
        "covariance matrix is singular or not positive definite; \
         add a small ridge (Sigma1 + eps I) before converting",
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn general(q: usize) -> CovSpec {
        CovSpec::new(CovStructure::GeneralSpd, q).unwrap()
    }

    #[test]
    fn anchor_point() {
        let s1 = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]);
        let xi = sigma1_to_xi(&s1, &general(2), 2.0).unwrap();
        let want = [-0.183, 0.215, -0.398];
        for k in 0..3 {
            assert!((xi[k] - want[k]).abs() < 1e-3, "{xi}");
        }
        let back = xi_to_sigma1(&want, &general(2), 2.0).unwrap();
        assert!((back - s1).amax() < 0.01);
    }

    #[test]
    fn zero_xi_is_identity() {
        for structure in [
            CovStructure::ScaledIdentity,
            CovStructure::Diagonal,
            CovStructure::GeneralSpd,
        ] {
            let spec = CovSpec::new(structure, 3).unwrap();
            let xi = vec![0.0; spec.n_params()];
            let s = xi_to_sigma1(&xi, &spec, 1.0).unwrap();
            assert!((s - DMatrix::<f64>::identity(3, 3)).amax() < 1e-15);
        }
        let id = DMatrix::<f64>::identity(2, 2);
        assert!(sigma1_to_xi(&id, &general(2), 1.0).unwrap().amax() < 1e-15);
    }

    #[test]
    fn parameter_counts() {
        let m = |s, q| CovSpec::new(s, q).unwrap().n_params();
        assert_eq!(m(CovStructure::ScaledIdentity, 4), 1);
        assert_eq!(m(CovStructure::Diagonal, 4), 4);
        assert_eq!(m(CovStructure::CompoundSymmetric, 4), 2);
        assert_eq!(m(CovStructure::GeneralSpd, 4), 10);
        assert!(CovSpec::new(CovStructure::CompoundSymmetric, 1).is_err());
    }

    #[test]
    fn compound_symmetric_roundtrip() {
        let spec = CovSpec::new(CovStructure::CompoundSymmetric, 3).unwrap();
        for &(v, rho) in &[(2.0, 0.3), (0.5, -0.4), (1.0, 0.95)] {
            let s = DMatrix::from_fn(3, 3, |i, j| if i == j { v } else { v * rho });
            let xi = spec.xi_from_relative(&s).unwrap();
            let back = spec.relative_cov(xi.as_slice()).unwrap();
            assert!((back - &s).amax() < 1e-12);
            let b = spec.relative_factor(xi.as_slice()).unwrap();
            assert!((&b * b.transpose() - &s).amax() < 1e-12);
        }
    }

    #[test]
    fn structure_mismatch_is_rejected() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let diag = CovSpec::new(CovStructure::Diagonal, 2).unwrap();
        assert!(matches!(diag.xi_from_relative(&s), Err(Error::Domain(_))));
        let iso = CovSpec::new(CovStructure::ScaledIdentity, 2).unwrap();
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0]));
        assert!(iso.xi_from_relative(&d).is_err());
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let err = general(2).xi_from_relative(&singular).unwrap_err();
        assert!(err.to_string().contains("ridge"));
    }

    #[test]
    fn factor_matches_cov() {
        let spec = general(3);
        let xi = [0.3, -0.2, 0.1, -0.5, 0.4, 0.7];
        let b = spec.relative_factor(&xi).unwrap();
        let s = spec.relative_cov(&xi).unwrap();
        assert!((&b * b.transpose() - s).amax() < 1e-12);
    }

    fn spd_strategy(q: usize) -> impl Strategy<Value = DMatrix<f64>> {
        proptest::collection::vec(-2.0f64..2.0, q * q).prop_map(move |v| {
            let a = DMatrix::from_vec(q, q, v);
            a.transpose() * &a + DMatrix::identity(q, q) * 0.1
        })
    }

    proptest! {
        #[test]
        fn general_roundtrip_from_matrix(s in spd_strategy(3), sigma2 in 0.2f64..5.0) {
            let spec = general(3);
            let sigma1 = &s * (sigma2 * sigma2);
            let xi = spec.xi(&sigma1, sigma2).unwrap();
            let back = spec.sigma1(xi.as_slice(), sigma2).unwrap();
            prop_assert!((back - &sigma1).amax() < 1e-8 * sigma1.amax().max(1.0));
        }

        #[test]
        fn general_roundtrip_from_xi(xi in proptest::collection::vec(-2.0f64..2.0, 6)) {
            let spec = general(3);
            let s = spec.relative_cov(&xi).unwrap();
            let back = spec.xi_from_relative(&s).unwrap();
            for k in 0..6 {
                prop_assert!((back[k] - xi[k]).abs() < 1e-8);
            }
        }

        #[test]
        fn map_is_total(xi in proptest::collection::vec(-10.0f64..10.0, 3)) {
            let b = general(2).relative_factor(&xi).unwrap();
            // eigenvalues of S = B B' are the squared singular values of B
            let sv = b.singular_values();
            prop_assert!(sv.iter().all(|&x| x > 0.0 && x.is_finite()));
            let cs = CovSpec::new(CovStructure::CompoundSymmetric, 2).unwrap();
            let s = cs.relative_cov(&xi[..2]).unwrap();
            prop_assert!(s[(0, 0)] > s[(0, 1)].abs());
        }

        #[test]
        fn sigma1_scales_with_sigma2_squared(xi in proptest::collection::vec(-1.0f64..1.0, 3), c in 0.1f64..10.0) {
            let spec = general(2);
            let a = spec.sigma1(&xi, 1.0).unwrap();
            let b = spec.sigma1(&xi, c).unwrap();
            prop_assert!((a * (c * c) - b).amax() < 1e-10 * c * c);
        }
    }
}
