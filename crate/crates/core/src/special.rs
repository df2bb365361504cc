//! Special functions: the scaled complementary error function, the normal
//! Mills ratio, and the modified Bessel function of the second kind.

use std::f64::consts::PI;

use libm::erfc;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const FRAC_1_SQRT_PI: f64 = 0.564_189_583_547_756_3;
/// log(sqrt(2*pi))
pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Scaled complementary error function `exp(x^2) * erfc(x)`.
///
/// Finite for all `x` where the result is representable; for `x` below about
/// -26.6 it overflows to `+inf`.
pub fn erfcx(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x < 0.0 {
        // erfc(-x) = 2 - erfc(x)
        return 2.0 * (x * x).exp() - erfcx(-x);
    }
    if x < 4.0 {
        return (x * x).exp() * erfc(x);
    }
    erfcx_continued_fraction(x)
}

/// Laplace continued fraction
/// `erfcx(x) = 1/sqrt(pi) * 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))`,
/// evaluated with the modified Lentz algorithm. Converges quickly for x >= 4.
fn erfcx_continued_fraction(x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut f = x;
    let mut c = x;
    let mut d = 0.0;
    for k in 1..500 {
        let a = 0.5 * k as f64;
        d = x + a * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = x + a / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    FRAC_1_SQRT_PI / f
}

#[inline]
pub fn std_normal_pdf(t: f64) -> f64 {
    (-0.5 * t * t - LN_SQRT_2PI).exp()
}

#[inline]
pub fn std_normal_ln_pdf(t: f64) -> f64 {
    -0.5 * t * t - LN_SQRT_2PI
}

/// Standard normal distribution function, accurate in both tails.
pub fn std_normal_cdf(t: f64) -> f64 {
    0.5 * erfc(-t / SQRT_2)
}

/// Natural log of the Mills ratio `R(t) = (1 - Phi(t)) / phi(t)`.
///
/// Never forms the ratio directly. For `t >= 0`, `R(t) = sqrt(pi/2) erfcx(t/sqrt 2)`.
/// For `t < 0`, `1 - Phi(t) = 1 - R(-t) phi(t)` so
/// `ln R(t) = ln1p(-R(-t) phi(t)) - ln phi(t)`, which stays finite where
/// `R(t)` itself overflows.
pub fn ln_mills_ratio(t: f64) -> f64 {
    if t >= 0.0 {
        (0.5 * PI).sqrt().ln() + erfcx(t / SQRT_2).ln()
    } else {
        let upper = (0.5 * PI).sqrt() * erfcx(-t / SQRT_2) * std_normal_pdf(t);
        (-upper).ln_1p() - std_normal_ln_pdf(t)
    }
}

/// Mills ratio `R(t) = (1 - Phi(t)) / phi(t)`; positive and decreasing.
pub fn mills_ratio(t: f64) -> f64 {
    if t >= 0.0 {
        (0.5 * PI).sqrt() * erfcx(t / SQRT_2)
    } else {
        ln_mills_ratio(t).exp()
    }
}

/// `ln(1 - Phi(t))`, accurate in both tails.
pub fn ln_normal_sf(t: f64) -> f64 {
    if t == f64::INFINITY {
        f64::NEG_INFINITY
    } else if t == f64::NEG_INFINITY {
        0.0
    } else {
        ln_mills_ratio(t) + std_normal_ln_pdf(t)
    }
}

/// `ln(Phi(b) - Phi(a))` for `a <= b`; either end may be infinite.
pub fn ln_normal_interval(a: f64, b: f64) -> f64 {
    if !(a < b) {
        return f64::NEG_INFINITY;
    }
    let h = b - a;
    let c = 0.5 * (a + b);
    if h * c.abs().max(1.0) <= 1.0 {
        // short interval: Gauss-Legendre on phi(c + u) / phi(c) = exp(-c u - u^2/2)
        const GL8: [(f64, f64); 4] = [
            (0.183_434_642_495_649_8, 0.362_683_783_378_362_0),
            (0.525_532_409_916_329_0, 0.313_706_645_877_887_3),
            (0.796_666_477_413_626_7, 0.222_381_034_453_374_5),
            (0.960_289_856_497_536_3, 0.101_228_536_290_376_3),
        ];
        let sum: f64 = GL8
            .iter()
            .map(|&(x, w)| {
                let u = 0.5 * h * x;
                w * ((-c * u - 0.5 * u * u).exp() + (c * u - 0.5 * u * u).exp())
            })
            .sum();
        return std_normal_ln_pdf(c) + (0.5 * h).ln() + sum.ln();
    }
    let upper = |lo: f64, hi: f64| {
        // ln(Q(lo) - Q(hi)) with lo >= 0
        let qa = ln_normal_sf(lo);
        let qb = ln_normal_sf(hi);
        qa + (-(qb - qa).exp_m1()).ln()
    };
    if a >= 0.0 {
        upper(a, b)
    } else if b <= 0.0 {
        upper(-b, -a)
    } else {
        (-(ln_normal_sf(b).exp() + ln_normal_sf(-a).exp())).ln_1p()
    }
}

/// Taylor coefficients of `1/Gamma(1+z)` about zero.
const RGAMMA1P: [f64; 29] = [
    1.00000000000000000e+00,
    5.77215664901532866e-01,
    -6.55878071520253902e-01,
    -4.20026350340952370e-02,
    1.66538611382291479e-01,
    -4.21977345555443334e-02,
    -9.62197152787697303e-03,
    7.21894324666309990e-03,
    -1.16516759185906517e-03,
    -2.15241674114950975e-04,
    1.28050282388116196e-04,
    -2.01348547807882387e-05,
    -1.25049348214267063e-06,
    1.13302723198169593e-06,
    -2.05633841697760707e-07,
    6.11609510448141609e-09,
    5.00200764446922295e-09,
    -1.18127457048702004e-09,
    1.04342671169110054e-10,
    7.78226343990507081e-12,
    -3.69680561864220598e-12,
    5.10037028745447575e-13,
    -2.05832605356650664e-14,
    -5.34812253942301782e-15,
    1.22677862823826084e-15,
    -1.18125930169745883e-16,
    1.18669225475160037e-18,
    1.41238065531803186e-18,
    -2.29874568443537022e-19,
];

/// Returns `(gam1, gam2, 1/Gamma(1+mu), 1/Gamma(1-mu))` for `|mu| <= 1/2`, where
/// `gam1 = (1/Gamma(1-mu) - 1/Gamma(1+mu)) / (2 mu)` and
/// `gam2 = (1/Gamma(1-mu) + 1/Gamma(1+mu)) / 2`.
fn temme_gammas(mu: f64) -> (f64, f64, f64, f64) {
    let mu2 = mu * mu;
    // even part -> gam2, odd part / mu -> -gam1
    let mut even = 0.0;
    let mut odd = 0.0;
    for (k, &c) in RGAMMA1P.iter().enumerate().rev() {
        if k % 2 == 0 {
            even = even * mu2 + c;
        } else {
            odd = odd * mu2 + c;
        }
    }
    let gampl = even + mu * odd;
    let gammi = even - mu * odd;
    (-odd, even, gampl, gammi)
}

/// Exponentially scaled modified Bessel function of the second kind,
/// `exp(x) * K_nu(x)`, for real order `nu` and `x > 0`.
///
/// Temme's series for `x <= 2` and Steed's continued fraction (CF2) above,
/// then forward recurrence in the order. Half-integer orders use the
/// closed form.
pub fn bessel_k_scaled(nu: f64, x: f64) -> f64 {
    if x.is_nan() || nu.is_nan() {
        return f64::NAN;
    }
    if x <= 0.0 {
        return if x == 0.0 { f64::INFINITY } else { f64::NAN };
    }
    let nu = nu.abs();
    if (nu - 0.5).abs() < 1e-15 {
        return (0.5 * PI / x).sqrt();
    }
    let nl = (nu + 0.5).floor();
    let xmu = nu - nl;
    let n_rec = nl as usize;
    let xmu2 = xmu * xmu;
    let xi = 1.0 / x;
    let xi2 = 2.0 * xi;

    let (mut k_mu, mut k_mu1);
    if x <= 2.0 {
        let x2 = 0.5 * x;
        let pimu = PI * xmu;
        let fact = if pimu.abs() < 1e-15 { 1.0 } else { pimu / pimu.sin() };
        let d = -x2.ln();
        let e = xmu * d;
        let fact2 = if e.abs() < 1e-15 { 1.0 } else { e.sinh() / e };
        let (gam1, gam2, gampl, gammi) = temme_gammas(xmu);
        let mut ff = fact * (gam1 * e.cosh() + gam2 * fact2 * d);
        let mut sum = ff;
        let ee = e.exp();
        let mut p = 0.5 * ee / gampl;
        let mut q = 0.5 / (ee * gammi);
        let mut c = 1.0;
        let dd = x2 * x2;
        let mut sum1 = p;
        for i in 1..10_000 {
            let fi = i as f64;
            ff = (fi * ff + p + q) / (fi * fi - xmu2);
            c *= dd / fi;
            p /= fi - xmu;
            q /= fi + xmu;
            let del = c * ff;
            sum += del;
            let del1 = c * (p - fi * ff);
            sum1 += del1;
            if del.abs() < sum.abs() * 1e-17 {
                break;
            }
        }
        let scale = x.exp();
        k_mu = sum * scale;
        k_mu1 = sum1 * xi2 * scale;
    } else {
        let mut b = 2.0 * (1.0 + x);
        let mut d = 1.0 / b;
        let mut h = d;
        let mut delh = d;
        let mut q1 = 0.0;
        let mut q2 = 1.0;
        let a1 = 0.25 - xmu2;
        let mut q = a1;
        let mut c = a1;
        let mut a = -a1;
        let mut s = 1.0 + q * delh;
        for i in 1..10_000 {
            let fi = i as f64;
            a -= 2.0 * fi;
            c = -a * c / (fi + 1.0);
            let qnew = (q1 - b * q2) / a;
            q1 = q2;
            q2 = qnew;
            q += c * qnew;
            b += 2.0;
            d = 1.0 / (b + a * d);
            delh = (b * d - 1.0) * delh;
            h += delh;
            let dels = q * delh;
            s += dels;
            if (dels / s).abs() < 1e-17 {
                break;
            }
        }
        h *= a1;
        k_mu = (0.5 * PI / x).sqrt() / s;
        k_mu1 = k_mu * (xmu + x + 0.5 - h) * xi;
    }
    for i in 1..=n_rec {
        let next = (xmu + i as f64) * xi2 * k_mu1 + k_mu;
        k_mu = k_mu1;
        k_mu1 = next;
    }
    k_mu
}

/// Modified Bessel function of the second kind `K_nu(x)` (also called the
/// third kind), real order, `x > 0`.
pub fn bessel_k(nu: f64, x: f64) -> f64 {
    bessel_k_scaled(nu, x) * (-x).exp()
}

/// `ln K_nu(x)`, finite well beyond the range where `K_nu(x)` underflows.
pub fn ln_bessel_k(nu: f64, x: f64) -> f64 {
    bessel_k_scaled(nu, x).ln() - x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn normal_interval_log_probability() {
        let inf = f64::INFINITY;
        let cases = [
            (-1.0, 2.0, -0.200_166_294_324_462_58),
            (3.0, 3.5, -6.796_868_006_683_432_8),
            (-40.0, -38.0, -726.557_216_018_820_13),
            (10.0, inf, -53.231_285_150_512_471),
            (-inf, -30.0, -454.321_243_956_343_2),
            (0.5, 0.500_000_1, -17.162_034_209_689_35),
            (-inf, inf, 0.0),
            (-3.0, 0.0, -0.695_850_627_645_421_27),
        ];
        for (a, b, want) in cases {
            let got = ln_normal_interval(a, b);
            assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "({a}, {b}): {got} vs {want}");
        }
        assert_eq!(ln_normal_interval(1.0, 1.0), f64::NEG_INFINITY);
    }

    // Reference values: 40-digit mpmath.
    #[test]
    fn erfcx_matches_high_precision() {
        let cases = [
            (0.01, 0.98881546104634251033),
            (0.3, 0.73459933456765514992),
            (1.0, 0.42758357615580700441),
            (2.0, 0.25539567631050574387),
            (2.5, 0.21080636406114358065),
            (7.0, 0.07980005432915293349),
            (25.0, 0.022549572432641358944),
        ];
        for (x, want) in cases {
            assert!(rel(erfcx(x), want) < 1e-13, "erfcx({x}) = {}", erfcx(x));
        }
    }

    #[test]
    fn erfcx_is_continuous_at_switch() {
        let below = erfcx(4.0 - 1e-12);
        let above = erfcx(4.0);
        assert!(rel(below, above) < 1e-12);
    }

    #[test]
    fn mills_ratio_matches_high_precision() {
        let cases = [
            (0.0, 1.2533141373155002512),
            (0.5, 0.87636445645369234673),
            (-1.0, 3.4770518117036944669),
            (2.0, 0.42136922928805447322),
            (5.0, 0.19280810471531576488),
            (8.5, 0.11608206338598229034),
            (10.0, 0.099028596471731921453),
            (30.0, 0.033296419072497213382),
            (38.0, 0.026297602974252964378),
            (-10.0, 1.2996129473592022903e22),
        ];
        for (t, want) in cases {
            assert!(rel(mills_ratio(t), want) < 1e-12, "R({t}) = {}", mills_ratio(t));
        }
        assert!((ln_mills_ratio(-37.0) - 685.41893853320467274).abs() < 1e-9);
    }

    #[test]
    fn mills_ratio_asymptotic_at_thirty() {
        let t: f64 = 30.0;
        let series = 1.0 / t - 1.0 / t.powi(3) + 3.0 / t.powi(5);
        assert!(rel(mills_ratio(t), series) < 1e-6);
    }

    #[test]
    fn mills_ratio_identity() {
        let mut t = -8.0;
        while t <= 8.0 {
            let lhs = mills_ratio(t) * std_normal_pdf(t) + std_normal_cdf(t);
            assert!((lhs - 1.0).abs() < 1e-10, "t = {t}: {lhs}");
            t += 0.05;
        }
    }

    #[test]
    fn mills_ratio_strictly_decreasing() {
        let mut prev = f64::INFINITY;
        let mut t = -20.0;
        while t < 40.0 {
            let r = mills_ratio(t);
            assert!(r > 0.0 && r < prev, "t = {t}");
            prev = r;
            t += 0.1;
        }
    }

    #[test]
    fn bessel_k_matches_high_precision() {
        #[rustfmt::skip]
        let cases: &[(f64, f64, f64)] = &[
            (0.0, 1e-3, 7.0236888005623813228),
            (0.0, 0.1, 2.4270690247020165578),
            (0.0, 1.0, 0.42102443824070833334),
            (0.0, 1.9, 0.12884597927604749404),
            (0.0, 2.1, 0.10078374088996693491),
            (0.0, 5.0, 0.0036910983340425942747),
            (0.0, 30.0, 2.1324774964630563712e-14),
            (0.0, 600.0, 1.3558285309948524376e-262),
            (1.0, 1e-3, 999.99623815608555346),
            (1.0, 0.1, 9.8538447808706055744),
            (1.0, 1.0, 0.60190723019723457474),
            (1.0, 1.9, 0.15966015303266762929),
            (1.0, 2.1, 0.12274641153350789646),
            (1.0, 5.0, 0.0040446134454521642084),
            (1.0, 30.0, 2.1677320018915494249e-14),
            (2.0, 1e-3, 1999999.5000009716277),
            (2.0, 0.1, 199.50396464211411711),
            (2.0, 1.0, 1.6248388986351774828),
            (2.0, 2.1, 0.21768508520759349803),
            (2.0, 30.0, 2.2769929632558263328e-14),
            (0.3, 1e-3, 14.406547529041027179),
            (0.3, 1.0, 0.43507602420880202329),
            (0.3, 1.9, 0.13137942527906503824),
            (0.3, 2.1, 0.10260207043456641398),
            (0.3, 600.0, 1.3559301373528982476e-262),
            (0.5, 0.1, 3.5861668387972600251),
            (0.5, 5.0, 0.0037766133746428825595),
        ];
        for &(nu, x, want) in cases {
            let got = bessel_k(nu, x);
            assert!(rel(got, want) < 1e-10, "K_{nu}({x}) = {got}, want {want}");
            assert!(rel(bessel_k(-nu, x), want) < 1e-10);
        }
    }

    #[test]
    fn ln_bessel_k_survives_underflow() {
        // K_0(2000) ~ exp(-2000) underflows; its log must not.
        let v = ln_bessel_k(0.0, 2000.0);
        let asym = (PI / 4000.0).sqrt().ln() - 2000.0 + (1.0 - 1.0 / 16000.0f64).ln();
        assert!((v - asym).abs() < 1e-7);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn normal_interval_is_additive(a in -8.0f64..8.0, d1 in 1e-9f64..4.0, d2 in 1e-9f64..4.0) {
            let (b, c) = (a + d1, a + d1 + d2);
            let whole = ln_normal_interval(a, c).exp();
            let parts = ln_normal_interval(a, b).exp() + ln_normal_interval(b, c).exp();
            prop_assert!((whole - parts).abs() <= 1e-12 * whole);
        }
    }
}
