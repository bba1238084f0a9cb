//! Student-t distribution functions and the Grubbs detection threshold.
//!
//! All special functions are implemented here: log-gamma (Lanczos), the
//! regularized incomplete beta (Lentz continued fraction), the t CDF in terms
//! of it, and quantiles by bracketing plus bisection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(x)` for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // Reflection: Γ(x)Γ(1−x) = π / sin(πx)
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS_COEF[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, &c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

fn check_dof(nu: f64) -> Result<()> {
    if nu > 0.0 && nu.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "degrees of freedom must be positive and finite, got {nu}"
        )))
    }
}

/// Density of the Student-t distribution with `nu` degrees of freedom.
pub fn student_t_pdf(a: f64, nu: f64) -> Result<f64> {
    check_dof(nu)?;
    let ln_norm =
        ln_gamma((nu + 1.0) / 2.0) - ln_gamma(nu / 2.0) - 0.5 * (nu * std::f64::consts::PI).ln();
    Ok((ln_norm - (nu + 1.0) / 2.0 * (a * a / nu).ln_1p()).exp())
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::invalid(format!("x = {x} outside [0, 1]")));
    }
    if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
        return Err(Error::invalid(format!(
            "shape parameters must be positive, got a = {a}, b = {b}"
        )));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x == 1.0 {
        return Ok(1.0);
    }
    // The continued fraction converges fast only below the mean; reflect otherwise.
    if x > (a + 1.0) / (a + b + 2.0) {
        return Ok(1.0 - incbeta_cf_scaled(1.0 - x, b, a));
    }
    Ok(incbeta_cf_scaled(x, a, b))
}

/// `x^a (1−x)^b / (a B(a,b)) · CF(x; a, b)`, the modified Lentz evaluation.
fn incbeta_cf_scaled(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    const MAX_ITER: usize = 10_000;

    let front = (a * x.ln() + b * (1.0 - x).ln() - ln_beta(a, b)).exp() / a;

    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut f = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        // even step
        let num = m * (b - m) * x / ((a + 2.0 * m - 1.0) * (a + 2.0 * m));
        d = 1.0 + num * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + num / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        f *= d * c;
        // odd step
        let num = -(a + m) * (a + b + m) * x / ((a + 2.0 * m) * (a + 2.0 * m + 1.0));
        d = 1.0 + num * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + num / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        f *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    front * f
}

/// `P(T < t)` for `T ~ t(nu)`.
///
/// For `t ≥ 0` this is `1 − ½ I_{ν/(t²+ν)}(ν/2, ½)`; negative arguments use symmetry.
pub fn student_t_cdf(t: f64, nu: f64) -> Result<f64> {
    check_dof(nu)?;
    if t.is_nan() {
        return Err(Error::invalid("t is NaN"));
    }
    if t.is_infinite() {
        return Ok(if t > 0.0 { 1.0 } else { 0.0 });
    }
    let upper_tail = |t: f64| -> Result<f64> {
        Ok(0.5 * regularized_incomplete_beta(nu / (t * t + nu), nu / 2.0, 0.5)?)
    };
    if t >= 0.0 {
        Ok(1.0 - upper_tail(t)?)
    } else {
        upper_tail(-t)
    }
}

/// The `t` with `P(T < t) = 1 − alpha`, i.e. the upper-`alpha` critical value.
pub fn critical_value(alpha: f64, nu: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha = {alpha} outside (0, 1)")));
    }
    check_dof(nu)?;
    let target = 1.0 - alpha;
    let f = |t: f64| student_t_cdf(t, nu).map(|p| p - target);

    if alpha == 0.5 {
        return Ok(0.0);
    }
    // Bracket on the side of zero where the root lives.
    let dir = if alpha < 0.5 { 1.0 } else { -1.0 };
    let (mut lo, mut hi) = (0.0_f64, dir);
    while f(hi)? * dir < 0.0 {
        lo = hi;
        hi *= 2.0;
        if hi.abs() > 1e300 {
            return Err(Error::invalid(format!(
                "could not bracket the {alpha} critical value for nu = {nu}"
            )));
        }
    }
    if lo > hi {
        std::mem::swap(&mut lo, &mut hi);
    }
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..2_000 {
        mid = 0.5 * (lo + hi);
        let fm = f(mid)?;
        if fm.abs() <= 1e-12 || hi - lo <= f64::EPSILON * mid.abs().max(1.0) {
            break;
        }
        if fm < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(mid)
}

/// Sample statistics of belonging reconstruction losses plus the test level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub n: usize,
    pub mu: f64,
    /// Sample standard deviation (`N − 1` denominator).
    pub sigma: f64,
    pub alpha: f64,
}

impl CalibrationSummary {
    pub fn new(n: usize, mu: f64, sigma: f64, alpha: f64) -> Result<Self> {
        let s = Self { n, mu, sigma, alpha };
        s.validate()?;
        Ok(s)
    }

    pub fn from_losses(losses: &[f64], alpha: f64) -> Result<Self> {
        let n = losses.len();
        if n < 3 {
            return Err(Error::invalid(format!(
                "need at least 3 calibration losses, got {n}"
            )));
        }
        let mu = losses.iter().sum::<f64>() / n as f64;
        let var = losses.iter().map(|l| (l - mu) * (l - mu)).sum::<f64>() / (n - 1) as f64;
        Self::new(n, mu, var.sqrt(), alpha)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 3 {
            return Err(Error::invalid(format!(
                "Grubbs threshold needs n >= 3, got {}",
                self.n
            )));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) || !self.mu.is_finite() {
            return Err(Error::invalid(format!(
                "bad summary statistics mu = {}, sigma = {}",
                self.mu, self.sigma
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid(format!(
                "alpha = {} outside (0, 1)",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Upper Grubbs bound on belonging losses:
/// `μ + (N−1)σ/√N · √(t² / (N−2+t²))` with `t = t_{α/N, N−2}`.
pub fn grubbs_threshold(s: &CalibrationSummary) -> Result<f64> {
    s.validate()?;
    let n = s.n as f64;
    let t = critical_value(s.alpha / n, n - 2.0)?;
    let t2 = t * t;
    Ok((n - 1.0) * s.sigma / n.sqrt() * (t2 / (n - 2.0 + t2)).sqrt() + s.mu)
}
