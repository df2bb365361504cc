//! Univariate slice sampling with stepping out and shrinkage.

use rand::Rng;
use rand_distr::Exp1;

#[derive(Debug, Clone, Copy)]
pub struct SliceSettings {
    /// Initial bracket width.
    pub width: f64,
    /// Maximum number of step-out expansions on both sides combined.
    pub max_steps: usize,
    /// Cap on shrinkage proposals before the current point is kept.
    pub max_shrink: usize,
}

impl Default for SliceSettings {
    fn default() -> Self {
        Self {
            width: 1.5,
            max_steps: 32,
            max_shrink: 200,
        }
    }
}

/// One slice-sampling update of `x0` (with `log_f(x0) = f0`, finite) for
/// the unnormalized log density `log_f`. Returns the new point and its value.
pub fn slice_step<R, F>(x0: f64, f0: f64, mut log_f: F, s: &SliceSettings, rng: &mut R) -> (f64, f64)
where
    R: Rng + ?Sized,
    F: FnMut(f64) -> f64,
{
    let e: f64 = rng.sample(Exp1);
    let level = f0 - e;
    let mut lo = x0 - s.width * rng.random::<f64>();
    let mut hi = lo + s.width;
    let mut j = (s.max_steps as f64 * rng.random::<f64>()).floor() as usize;
    let mut k = s.max_steps.saturating_sub(1).saturating_sub(j);
    while j > 0 && log_f(lo) > level {
        lo -= s.width;
        j -= 1;
    }
    while k > 0 && log_f(hi) > level {
        hi += s.width;
        k -= 1;
    }
    for _ in 0..s.max_shrink {
        let x1 = lo + (hi - lo) * rng.random::<f64>();
        let f1 = log_f(x1);
        if f1 > level {
            return (x1, f1);
        }
        if x1 < x0 {
            lo = x1;
        } else {
            hi = x1;
        }
    }
    (x0, f0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn samples_standard_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = |x: f64| -0.5 * x * x;
        let mut x = 3.0;
        let mut fx = f(x);
        let n = 100_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            (x, fx) = slice_step(x, fx, f, &SliceSettings::default(), &mut rng);
            s1 += x;
            s2 += x * x;
        }
        let mean = s1 / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.03, "{mean}");
        assert!((var - 1.0).abs() < 0.03, "{var}");
    }

    #[test]
    fn respects_hard_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = |x: f64| if (0.0..1.0).contains(&x) { 0.0 } else { f64::NEG_INFINITY };
        let mut x = 0.5;
        let mut fx = 0.0;
        let mut mean = 0.0;
        for _ in 0..20_000 {
            (x, fx) = slice_step(x, fx, f, &SliceSettings::default(), &mut rng);
            assert!((0.0..1.0).contains(&x));
            mean += x / 20_000.0;
        }
        assert!((mean - 0.5).abs() < 0.02);
    }
}
