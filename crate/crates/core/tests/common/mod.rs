//! Independent reference computations shared by the integration tests.
//!
//! Nothing here calls the library's special functions: the Student-t density is
//! normalised by numerical quadrature, tail probabilities come from adaptive Simpson
//! integration and quantiles from plain bisection on those tails.

#![allow(dead_code)]

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn adaptive(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    adaptive(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + adaptive(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

/// Adaptive Simpson quadrature of `f` over `[a, b]`.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    // Start from eight panels so narrow peaks are not missed by the first estimate.
    let panels = 8;
    let h = (b - a) / panels as f64;
    (0..panels)
        .map(|i| {
            let (lo, hi) = (a + i as f64 * h, a + (i + 1) as f64 * h);
            let (fa, fm, fb) = (f(lo), f(0.5 * (lo + hi)), f(hi));
            let whole = simpson(lo, hi, fa, fm, fb);
            adaptive(f, lo, hi, fa, fm, fb, whole, tol / panels as f64, 50)
        })
        .sum()
}

/// `∫_x^∞ g(t) dt` through the substitution `t = x + s/(1−s)`, `s ∈ [0, 1)`.
fn upper_integral(g: &dyn Fn(f64) -> f64, x: f64, tol: f64) -> f64 {
    let h = |s: f64| {
        if s >= 1.0 {
            return 0.0;
        }
        let d = 1.0 - s;
        g(x + s / d) / (d * d)
    };
    integrate(&h, 0.0, 1.0, tol)
}

fn kernel(nu: f64) -> impl Fn(f64) -> f64 {
    move |t: f64| (1.0 + t * t / nu).powf(-(nu + 1.0) / 2.0)
}

pub struct TOracle {
    pub nu: f64,
    norm: f64,
}

impl TOracle {
    pub fn new(nu: f64) -> Self {
        let k = kernel(nu);
        let half = upper_integral(&k, 0.0, 1e-14);
        Self { nu, norm: 2.0 * half }
    }

    pub fn pdf(&self, t: f64) -> f64 {
        kernel(self.nu)(t) / self.norm
    }

    /// `P(T > t)`.
    pub fn upper_tail(&self, t: f64) -> f64 {
        let k = kernel(self.nu);
        if t >= 0.0 {
            upper_integral(&k, t, 1e-14) / self.norm
        } else {
            1.0 - upper_integral(&k, -t, 1e-14) / self.norm
        }
    }

    pub fn cdf(&self, t: f64) -> f64 {
        1.0 - self.upper_tail(t)
    }

    /// Upper-tail quantile `t` with `P(T > t) = alpha`, for `alpha < 0.5`.
    pub fn critical_value(&self, alpha: f64) -> f64 {
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        while self.upper_tail(hi) > alpha {
            hi *= 2.0;
        }
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if self.upper_tail(mid) > alpha {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Grubbs threshold from scratch: sample mean and `N−1` standard deviation plus the
/// oracle quantile at `alpha / N` with `N − 2` degrees of freedom.
pub fn grubbs_oracle(n: usize, mu: f64, sigma: f64, alpha: f64) -> f64 {
    let nf = n as f64;
    let t = TOracle::new(nf - 2.0).critical_value(alpha / nf);
    mu + (nf - 1.0) / nf.sqrt() * sigma * (t * t / (nf - 2.0 + t * t)).sqrt()
}

/// Central finite difference of `f` along coordinate `i` of `x`.
pub fn central_difference(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut p = x.to_vec();
    p[i] = x[i] + h;
    let fp = f(&p);
    p[i] = x[i] - h;
    let fm = f(&p);
    (fp - fm) / (2.0 * h)
}

/// AUROC by enumerating every (belonging, other) pair, ties counted as one half.
pub fn auroc_by_pairs(belonging: &[f64], other: &[f64]) -> f64 {
    let mut s = 0.0;
    for &b in belonging {
        for &o in other {
            s += if o > b {
                1.0
            } else if o == b {
                0.5
            } else {
                0.0
            };
        }
    }
    s / (belonging.len() * other.len()) as f64
}
