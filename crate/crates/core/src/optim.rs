//! Derivative-free and quasi-Newton minimization on `Vec<f64>`, wrapping argmin.

use argmin::core::{CostFunction, Executor, Gradient, State, TerminationReason};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::neldermead::NelderMead;
use argmin::solver::quasinewton::BFGS;

use std::cell::{Cell, RefCell};

use crate::error::{Error, Result};

/// Objective values at or above this are treated as infeasible.
const INFEASIBLE: f64 = 1e300;

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: u64,
    pub converged: bool,
}

struct Objective<'a> {
    f: &'a dyn Fn(&[f64]) -> f64,
    fd_step: f64,
    /// Evaluations allowed before the run is aborted.
    budget: usize,
    evals: &'a Cell<usize>,
    /// Best point evaluated so far.
    best: &'a RefCell<Option<(Vec<f64>, f64)>>,
}

impl Objective<'_> {

    fn eval(&self, x: &[f64]) -> f64 {
        self.evals.set(self.evals.get() + 1);
        let v = (self.f)(x);
        let v = if v.is_finite() { v.min(INFEASIBLE) } else { INFEASIBLE };
        let mut best = self.best.borrow_mut();
        if best.as_ref().is_none_or(|(_, b)| v < *b) {
            *best = Some((x.to_vec(), v));
        }
        v
    }

    fn check_budget(&self) -> std::result::Result<(), argmin::core::Error> {
        if self.evals.get() >= self.budget {
            Err(argmin::core::Error::msg("evaluation budget exhausted"))
        } else {
            Ok(())
        }
    }
}

impl CostFunction for Objective<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        self.check_budget()?;
        Ok(self.eval(p))
    }
}

impl Gradient for Objective<'_> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;

    fn gradient(&self, p: &Self::Param) -> std::result::Result<Vec<f64>, argmin::core::Error> {
        self.check_budget()?;
        Ok(central_gradient(|x| self.eval(x), p, self.fd_step))
    }
}

/// Central-difference gradient with relative step `h (1 + |x_i|)`.
pub fn central_gradient<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let step = h * (1.0 + x[i].abs());
            xp[i] = x[i] + step;
            let fp = f(&xp);
            xp[i] = x[i] - step;
            let fm = f(&xp);
            xp[i] = x[i];
            (fp - fm) / (2.0 * step)
        })
        .collect()
}

/// Central-difference Hessian.
pub fn central_hessian<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64) -> Vec<Vec<f64>> {
    let n = x.len();
    let steps: Vec<f64> = x.iter().map(|v| h * (1.0 + v.abs())).collect();
    let f0 = f(x);
    let mut out = vec![vec![0.0; n]; n];
    let mut xp = x.to_vec();
    for i in 0..n {
        let hi = steps[i];
        xp[i] = x[i] + hi;
        let fp = f(&xp);
        xp[i] = x[i] - hi;
        let fm = f(&xp);
        xp[i] = x[i];
        out[i][i] = (fp - 2.0 * f0 + fm) / (hi * hi);
        for j in 0..i {
            let hj = steps[j];
            let mut at = |si: f64, sj: f64| {
                xp[i] = x[i] + si * hi;
                xp[j] = x[j] + sj * hj;
                let v = f(&xp);
                xp[i] = x[i];
                xp[j] = x[j];
                v
            };
            let v = (at(1.0, 1.0) - at(1.0, -1.0) - at(-1.0, 1.0) + at(-1.0, -1.0)) / (4.0 * hi * hj);
            out[i][j] = v;
            out[j][i] = v;
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct NelderMeadOptions {
    /// Initial simplex edge per coordinate.
    pub steps: Vec<f64>,
    pub max_iter: u64,
    /// Stop when the standard deviation of simplex values drops below this.
    pub sd_tolerance: f64,
}

pub fn nelder_mead(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], opts: &NelderMeadOptions) -> Result<Minimum> {
    let n = x0.len();
    if n == 0 {
        return Ok(Minimum {
            x: Vec::new(),
            f: f(x0),
            iterations: 0,
            converged: true,
        });
    }
    let mut simplex = vec![x0.to_vec()];
    for i in 0..n {
        let mut v = x0.to_vec();
        v[i] += opts.steps.get(i).copied().unwrap_or(0.1);
        simplex.push(v);
    }
    let solver = NelderMead::new(simplex)
        .with_sd_tolerance(opts.sd_tolerance)
        .map_err(|e| Error::Optimizer(e.to_string()))?;
    let evals = Cell::new(0);
    let best = RefCell::new(None);
    let problem = Objective {
        f,
        fd_step: 1e-5,
        budget: usize::MAX,
        evals: &evals,
        best: &best,
    };
    let res = Executor::new(problem, solver)
        .configure(|s| s.max_iters(opts.max_iter))
        .run()
        .map_err(|e| Error::Optimizer(e.to_string()))?;
    let state = res.state();
    let x = state
        .get_best_param()
        .cloned()
        .ok_or_else(|| Error::Optimizer("Nelder-Mead returned no parameters".into()))?;
    let converged = matches!(
        state.get_termination_reason(),
        Some(TerminationReason::SolverConverged)
    );
    Ok(Minimum {
        f: state.get_best_cost(),
        x,
        iterations: state.get_iter(),
        converged,
    })
}

/// BFGS with a More-Thuente line search and finite-difference gradients,
/// capped at about `max_iter (2n + 8)` evaluations. Returns the best point
/// evaluated, or `None` when nothing improves on `x0`.
pub fn bfgs_polish(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], max_iter: u64, fd_step: f64) -> Option<Minimum> {
    let n = x0.len();
    if n == 0 {
        return None;
    }
    let f0 = f(x0);
    let identity: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let solver = BFGS::new(MoreThuenteLineSearch::new())
        .with_tolerance_grad(1e-6)
        .ok()?
        .with_tolerance_cost(1e-12)
        .ok()?;
    let evals = Cell::new(0);
    let best = RefCell::new(None);
    let problem = Objective {
        f,
        fd_step,
        budget: max_iter as usize * (2 * n + 8),
        evals: &evals,
        best: &best,
    };
    let run = Executor::new(problem, solver)
        .configure(|s| s.param(x0.to_vec()).inv_hessian(identity).max_iters(max_iter))
        .run();
    let (iterations, converged) = match &run {
        Ok(res) => (
            res.state().get_iter(),
            matches!(res.state().get_termination_reason(), Some(TerminationReason::SolverConverged)),
        ),
        Err(_) => (max_iter, false),
    };
    let (x, fx) = best.into_inner()?;
    if !(fx < f0) || fx >= INFEASIBLE {
        return None;
    }
    Some(Minimum {
        x,
        f: fx,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosen(x: &[f64]) -> f64 {
        (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2)
    }

    #[test]
    fn nelder_mead_then_bfgs_on_rosenbrock() {
        let opts = NelderMeadOptions {
            steps: vec![0.5, 0.5],
            max_iter: 2000,
            sd_tolerance: 1e-14,
        };
        let m = nelder_mead(&rosen, &[-1.2, 1.0], &opts).unwrap();
        assert!((m.x[0] - 1.0).abs() < 1e-3 && (m.x[1] - 1.0).abs() < 1e-3, "{:?}", m.x);
        let p = bfgs_polish(&rosen, &m.x, 200, 1e-7).unwrap_or(m);
        assert!((p.x[0] - 1.0).abs() < 1e-5, "{:?}", p.x);
    }

    #[test]
    fn infeasible_values_are_avoided() {
        let f = |x: &[f64]| if x[0] < 0.0 { f64::NAN } else { (x[0] - 2.0).powi(2) };
        let opts = NelderMeadOptions {
            steps: vec![1.0],
            max_iter: 500,
            sd_tolerance: 1e-14,
        };
        let m = nelder_mead(&f, &[0.5], &opts).unwrap();
        assert!((m.x[0] - 2.0).abs() < 1e-5);
    }

    #[test]
    fn finite_difference_derivatives() {
        let f = |x: &[f64]| x[0] * x[0] * x[1] + x[1].exp();
        let g = central_gradient(f, &[1.0, 0.5], 1e-6);
        assert!((g[0] - 1.0).abs() < 1e-7);
        assert!((g[1] - (1.0 + 0.5f64.exp())).abs() < 1e-7);
        let h = central_hessian(f, &[1.0, 0.5], 1e-4);
        assert!((h[0][0] - 1.0).abs() < 1e-5);
        assert!((h[0][1] - 2.0).abs() < 1e-5);
        assert!((h[1][1] - 0.5f64.exp()).abs() < 1e-5);
    }
}
