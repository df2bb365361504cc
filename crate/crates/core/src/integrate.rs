//! One-dimensional integration over the real line, by tanh-sinh quadrature on
//! pieces split at the integrand's kinks plus geometrically growing tail panels.

use quadrature::double_exponential;

/// Tail panels in units of `scale`, measured outward from the outermost breakpoint.
const TAIL_EDGES: [f64; 9] = [0.0, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 80.0];

#[derive(Debug, Clone, Copy)]
pub struct Integral {
    pub value: f64,
    pub error_estimate: f64,
}

/// Integrates `f` over the real line. `breakpoints` are the kinks of `f`
/// (may be empty); `scale` is the integrand's spread, which sets the tail
/// truncation at 80 scales beyond the outermost breakpoint.
pub fn integrate_real_line_with_error<F>(f: F, breakpoints: &[f64], scale: f64, tol: f64) -> Integral
where
    F: Fn(f64) -> f64,
{
    let mut pts: Vec<f64> = breakpoints.iter().copied().filter(|b| b.is_finite()).collect();
    if pts.is_empty() {
        pts.push(0.0);
    }
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    let lo = pts[0];
    let hi = *pts.last().unwrap();

    let mut panels = Vec::new();
    for w in TAIL_EDGES.windows(2) {
        panels.push((lo - w[1] * scale, lo - w[0] * scale));
        panels.push((hi + w[0] * scale, hi + w[1] * scale));
    }
    for w in pts.windows(2) {
        // Split long interior spans so each panel sees at most a few scales.
        let n = (((w[1] - w[0]) / (4.0 * scale)).ceil() as usize).clamp(1, 64);
        let step = (w[1] - w[0]) / n as f64;
        for k in 0..n {
            panels.push((w[0] + k as f64 * step, w[0] + (k + 1) as f64 * step));
        }
    }
    let per_panel = tol / panels.len() as f64;
    let mut value = 0.0;
    let mut error_estimate = 0.0;
    for (a, b) in panels {
        let out = double_exponential::integrate(&f, a, b, per_panel);
        value += out.integral;
        error_estimate += out.error_estimate;
    }
    Integral {
        value,
        error_estimate,
    }
}

pub fn integrate_real_line<F>(f: F, breakpoints: &[f64], scale: f64, tol: f64) -> f64
where
    F: Fn(f64) -> f64,
{
    integrate_real_line_with_error(f, breakpoints, scale, tol).value
}

/// Total mass, mean and variance of a density on the real line.
pub fn moments<F>(f: F, breakpoints: &[f64], scale: f64) -> (f64, f64, f64)
where
    F: Fn(f64) -> f64,
{
    let mass = integrate_real_line(&f, breakpoints, scale, 1e-13);
    let mean = integrate_real_line(|t| t * f(t), breakpoints, scale, 1e-13) / mass;
    let var = integrate_real_line(|t| (t - mean) * (t - mean) * f(t), breakpoints, scale, 1e-13) / mass;
    (mass, mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_moments() {
        let f = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let (mass, mean, var) = moments(f, &[], 1.0);
        assert!((mass - 1.0).abs() < 1e-12);
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-11);
    }

    #[test]
    fn kinked_integrand() {
        // |t| e^{-|t - 3|}: kinks at 0 and 3.
        let v = integrate_real_line(|t: f64| t.abs() * (-(t - 3.0).abs()).exp(), &[0.0, 3.0], 1.0, 1e-12);
        // closed form: 6 + 2 e^{-3}
        assert!((v - (6.0 + 2.0 * (-3.0f64).exp())).abs() < 1e-10, "{v}");
    }
}
