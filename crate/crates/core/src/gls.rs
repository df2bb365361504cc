//! Generalized least squares for covariances of the form
//! `Psi = D + a Z S Z'` with `D` diagonal, `a > 0` and `S = B B'`.
//!
//! Each term (a cluster, or a cluster under one latent draw) is reduced once
//! to `Z'D^-1 Z`, `Z'D^-1 X`, `Z'D^-1 y`, `X'D^-1 X`, `X'D^-1 y`, `y'D^-1 y`
//! and `ln|D|`. For any `B` the Woodbury identity then gives
//!
//! * `ln|Psi| = ln|D| + ln|H|`, `H = I + a B'Z'D^-1 Z B`
//! * `u'Psi^-1 v = u'D^-1 v - a (B'Z'D^-1 u)' H^-1 (B'Z'D^-1 v)`
//!
//! at a cost independent of the cluster size.

use nalgebra::{DMatrix, DVector};

use crate::data::Cluster;
use crate::error::{Error, Result};

/// Reduced statistics for a set of terms, stored contiguously.
#[derive(Debug, Clone)]
pub struct GlsTerms {
    p: usize,
    q: usize,
    stride: usize,
    data: Vec<f64>,
}

// per-term layout
const A: usize = 0;
const LOGDET_D: usize = 1;
const YY: usize = 2;
const WEIGHT: usize = 3;
const HEAD: usize = 4;

impl GlsTerms {
    pub fn new(p: usize, q: usize) -> Self {
        let stride = HEAD + q * q + q * (p + 1) + p * p + p;
        Self {
            p,
            q,
            stride,
            data: Vec::new(),
        }
    }

    pub fn with_capacity(p: usize, q: usize, terms: usize) -> Self {
        let mut t = Self::new(p, q);
        t.data.reserve(terms * t.stride);
        t
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.stride
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn clear(&mut self) {
        self.data.clear();
    }

    /// Adds `cluster` under `Psi = diag(d) + a Z S Z'` with weight `weight`.
    pub fn push(&mut self, cluster: &Cluster, d: &[f64], a: f64, weight: f64) {
        self.push_parts(&cluster.y, &cluster.x, &cluster.z, d, a, weight);
    }

    pub fn push_parts(
        &mut self,
        y: &DVector<f64>,
        x: &DMatrix<f64>,
        z: &DMatrix<f64>,
        d: &[f64],
        a: f64,
        weight: f64,
    ) {
        let (p, q) = (self.p, self.q);
        let n = y.len();
        debug_assert_eq!(d.len(), n);
        let start = self.data.len();
        self.data.resize(start + self.stride, 0.0);
        let t = &mut self.data[start..];
        t[A] = a;
        t[WEIGHT] = weight;
        let (head, rest) = t.split_at_mut(HEAD);
        let (g, rest) = rest.split_at_mut(q * q);
        let (zr, rest) = rest.split_at_mut(q * (p + 1));
        let (xx, xy) = rest.split_at_mut(p * p);
        let mut logdet = 0.0;
        let mut yy = 0.0;
        for i in 0..n {
            let di = 1.0 / d[i];
            logdet += d[i].ln();
            let yi = y[i];
            yy += di * yi * yi;
            for r in 0..q {
                let zri = z[(i, r)] * di;
                for c in 0..q {
                    g[r * q + c] += zri * z[(i, c)];
                }
                for c in 0..p {
                    zr[r * (p + 1) + c] += zri * x[(i, c)];
                }
                zr[r * (p + 1) + p] += zri * yi;
            }
            for r in 0..p {
                let xri = x[(i, r)] * di;
                for c in 0..p {
                    xx[r * p + c] += xri * x[(i, c)];
                }
                xy[r] += xri * yi;
            }
        }
        head[LOGDET_D] = logdet;
        head[YY] = yy;
    }

    /// Weighted sums of `X'Psi^-1 X`, `X'Psi^-1 y`, `y'Psi^-1 y` and `ln|Psi|`
    /// for `S = B B'` (`b` is `q x q`). Fails if some `H` is not positive definite.
    pub fn accumulate(&self, b: &DMatrix<f64>) -> Result<GlsSums> {
        let (p, q) = (self.p, self.q);
        let mut sums = GlsSums::zeros(p);
        let mut ws = Workspace::new(p, q);
        // B row-major
        for r in 0..q {
            for c in 0..q {
                ws.b[r * q + c] = b[(r, c)];
            }
        }
        for term in self.data.chunks_exact(self.stride) {
            ws.term(term, p, q, &mut sums)?;
        }
        Ok(sums)
    }

    /// `ln|Psi|` and the quadratic form `e'Psi^-1 e` of each term at `beta`.
    pub fn per_term(&self, b: &DMatrix<f64>, beta: &DVector<f64>) -> Result<Vec<(f64, f64)>> {
        let (p, q) = (self.p, self.q);
        let mut ws = Workspace::new(p, q);
        for r in 0..q {
            for c in 0..q {
                ws.b[r * q + c] = b[(r, c)];
            }
        }
        let mut out = Vec::with_capacity(self.len());
        for term in self.data.chunks_exact(self.stride) {
            let mut s = GlsSums::zeros(p);
            ws.term(term, p, q, &mut s)?;
            // e'Psi^-1 e = y'y - 2 b'X'y + b'X'X b (all Psi-weighted), weight removed
            let w = term[WEIGHT];
            let xy = &s.xpy / w;
            let xx = &s.xpx / w;
            let quad = s.ypy / w - 2.0 * beta.dot(&xy) + beta.dot(&(xx * beta));
            out.push((s.logdet / w, quad));
        }
        Ok(out)
    }
}

/// Weighted totals over terms.
#[derive(Debug, Clone)]
pub struct GlsSums {
    pub xpx: DMatrix<f64>,
    pub xpy: DVector<f64>,
    pub ypy: f64,
    pub logdet: f64,
}

impl GlsSums {
    fn zeros(p: usize) -> Self {
        Self {
            xpx: DMatrix::zeros(p, p),
            xpy: DVector::zeros(p),
            ypy: 0.0,
            logdet: 0.0,
        }
    }

    /// `beta = (X'Psi^-1 X)^-1 X'Psi^-1 y` and the residual quadratic form.
    pub fn solve(&self) -> Result<(DVector<f64>, f64)> {
        let ch = self
            .xpx
            .clone()
            .cholesky()
            .ok_or_else(|| Error::numeric("X' Psi^-1 X is not positive definite"))?;
        let beta = ch.solve(&self.xpy);
        let rss = (self.ypy - self.xpy.dot(&beta)).max(0.0);
        Ok((beta, rss))
    }

    /// `(X'Psi^-1 X)^-1`.
    pub fn inverse_information(&self) -> Result<DMatrix<f64>> {
        self.xpx
            .clone()
            .cholesky()
            .map(|c| c.inverse())
            .ok_or_else(|| Error::numeric("X' Psi^-1 X is not positive definite"))
    }
}

struct Workspace {
    b: Vec<f64>,
    t: Vec<f64>,
    h: Vec<f64>,
    w: Vec<f64>,
}

impl Workspace {
    fn new(p: usize, q: usize) -> Self {
        Self {
            b: vec![0.0; q * q],
            t: vec![0.0; q * q],
            h: vec![0.0; q * q],
            w: vec![0.0; q * (p + 1)],
        }
    }

    #[inline]
    fn term(&mut self, term: &[f64], p: usize, q: usize, sums: &mut GlsSums) -> Result<()> {
        let a = term[A];
        let wt = term[WEIGHT];
        let g = &term[HEAD..HEAD + q * q];
        let zr = &term[HEAD + q * q..HEAD + q * q + q * (p + 1)];
        let xx = &term[HEAD + q * q + q * (p + 1)..HEAD + q * q + q * (p + 1) + p * p];
        let xy = &term[HEAD + q * q + q * (p + 1) + p * p..];
        let b = &self.b;
        // T = G B
        for r in 0..q {
            for c in 0..q {
                let mut s = 0.0;
                for k in 0..q {
                    s += g[r * q + k] * b[k * q + c];
                }
                self.t[r * q + c] = s;
            }
        }
        // H = I + a B'T (lower triangle)
        for r in 0..q {
            for c in 0..=r {
                let mut s = 0.0;
                for k in 0..q {
                    s += b[k * q + r] * self.t[k * q + c];
                }
                self.h[r * q + c] = a * s + if r == c { 1.0 } else { 0.0 };
            }
        }
        // Cholesky in place, lower
        let mut logdet_h = 0.0;
        for j in 0..q {
            let mut s = self.h[j * q + j];
            for k in 0..j {
                s -= self.h[j * q + k] * self.h[j * q + k];
            }
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::numeric("Woodbury core matrix is not positive definite"));
            }
            let l = s.sqrt();
            self.h[j * q + j] = l;
            logdet_h += 2.0 * l.ln();
            for i in j + 1..q {
                let mut s = self.h[i * q + j];
                for k in 0..j {
                    s -= self.h[i * q + k] * self.h[j * q + k];
                }
                self.h[i * q + j] = s / l;
            }
        }
        // W = L^-1 B' [Z'D^-1 X | Z'D^-1 y]
        let pc = p + 1;
        for r in 0..q {
            for c in 0..pc {
                let mut s = 0.0;
                for k in 0..q {
                    s += b[k * q + r] * zr[k * pc + c];
                }
                for k in 0..r {
                    s -= self.h[r * q + k] * self.w[k * pc + c];
                }
                self.w[r * pc + c] = s / self.h[r * q + r];
            }
        }
        for r in 0..p {
            for c in 0..p {
                let mut s = 0.0;
                for k in 0..q {
                    s += self.w[k * pc + r] * self.w[k * pc + c];
                }
                sums.xpx[(r, c)] += wt * (xx[r * p + c] - a * s);
            }
            let mut s = 0.0;
            for k in 0..q {
                s += self.w[k * pc + r] * self.w[k * pc + p];
            }
            sums.xpy[r] += wt * (xy[r] - a * s);
        }
        let mut s = 0.0;
        for k in 0..q {
            s += self.w[k * pc + p] * self.w[k * pc + p];
        }
        sums.ypy += wt * (term[YY] - a * s);
        sums.logdet += wt * (term[LOGDET_D] + logdet_h);
        Ok(())
    }
}

/// A factor `F` with `F F' = S` for a symmetric nonnegative definite `S`
/// (Cholesky, else eigen square root with negative rounding clipped).
pub fn psd_factor(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = s.nrows();
    if s.ncols() != n {
        return Err(Error::domain("matrix must be square"));
    }
    if let Some(ch) = s.clone().cholesky() {
        return Ok(ch.l());
    }
    let scale = s.amax();
    let sym = (s + s.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    if eig.eigenvalues.iter().any(|&v| v < -1e-10 * scale.max(1e-300)) {
        return Err(Error::domain("matrix is not nonnegative definite"));
    }
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root))
}

/// Residual variance multipliers `v` (known variances, or ones).
pub fn unit_or_known(cluster: &Cluster) -> Vec<f64> {
    match &cluster.known_var {
        Some(v) => v.iter().copied().collect(),
        None => vec![1.0; cluster.len()],
    }
}
