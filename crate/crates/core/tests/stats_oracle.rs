mod common;

use common::{grubbs_oracle, TOracle};
use latent_origin::prelude::*;
use proptest::prelude::*;

const DOFS: [f64; 7] = [1.0, 2.0, 5.0, 10.0, 30.0, 98.0, 100.0];
const ALPHAS: [f64; 4] = [0.1, 0.05, 0.01, 0.0005];

/// Upper-tail quantiles frozen from an arbitrary-precision reference.
const FROZEN_QUANTILES: [(f64, f64, f64); 8] = [
    (1.0, 0.0005, 636.6192487687196),
    (2.0, 0.01, 6.964_556_734_283_274),
    (5.0, 0.05, 2.015_048_373_333_024),
    (10.0, 0.1, 1.372_183_641_110_336),
    (30.0, 0.0005, 3.645_958_635_042_022),
    (98.0, 0.05, 1.660_551_217_044_058),
    (98.0, 0.0005, 3.392_588_114_128_188),
    (100.0, 0.01, 2.364_217_366_238_482),
];

#[test]
fn cdf_matches_quadrature_on_grid() {
    for nu in DOFS {
        let oracle = TOracle::new(nu);
        for k in 0..=40 {
            let t = -5.0 + 0.25 * k as f64;
            let got = student_t_cdf(t, nu).unwrap();
            let want = oracle.cdf(t);
            assert!((got - want).abs() <= 1e-8, "nu={nu} t={t}: {got} vs {want}");
        }
    }
}

#[test]
fn pdf_matches_normalised_quadrature() {
    for nu in DOFS {
        let oracle = TOracle::new(nu);
        for t in [-3.0, -0.5, 0.0, 1.25, 4.0] {
            let (got, want) = (student_t_pdf(t, nu).unwrap(), oracle.pdf(t));
            assert!((got - want).abs() <= 1e-10 * want.max(1.0), "nu={nu} t={t}");
        }
    }
}

#[test]
fn critical_values_match_bisection_oracle() {
    for nu in DOFS {
        let oracle = TOracle::new(nu);
        for alpha in ALPHAS {
            let got = critical_value(alpha, nu).unwrap();
            let want = oracle.critical_value(alpha);
            assert!((got - want).abs() <= 1e-4, "nu={nu} alpha={alpha}: {got} vs {want}");
        }
    }
}

#[test]
fn critical_values_match_frozen_reference() {
    for (nu, alpha, want) in FROZEN_QUANTILES {
        let got = critical_value(alpha, nu).unwrap();
        assert!((got - want).abs() <= 1e-9 * want, "nu={nu} alpha={alpha}: {got}");
    }
}

#[test]
fn grubbs_threshold_at_operating_point() {
    // N = 100, alpha = 0.05, mu = 0, sigma = 1
    let s = CalibrationSummary::new(100, 0.0, 1.0, 0.05).unwrap();
    let got = grubbs_threshold(&s).unwrap();
    assert!((got - grubbs_oracle(100, 0.0, 1.0, 0.05)).abs() <= 1e-6);
    assert!((got - 3.209_520_302_030_802).abs() <= 1e-9);
}

#[test]
fn degenerate_spread_returns_mean_exactly() {
    for mu in [0.0, 1e-9, 0.25, 17.0] {
        for n in [3, 10, 100] {
            let s = CalibrationSummary::new(n, mu, 0.0, 0.05).unwrap();
            assert_eq!(grubbs_threshold(&s).unwrap(), mu);
        }
    }
}

proptest! {
    #[test]
    fn threshold_increases_with_sigma_and_mu(
        mu in -10.0f64..10.0,
        sigma in 1e-6f64..10.0,
        d in 1e-3f64..1.0,
        n in 3usize..200,
    ) {
        let t = |mu: f64, sigma: f64| {
            grubbs_threshold(&CalibrationSummary::new(n, mu, sigma, 0.05).unwrap()).unwrap()
        };
        prop_assert!(t(mu, sigma + d) > t(mu, sigma));
        prop_assert!(t(mu + d, sigma) > t(mu, sigma));
    }

    #[test]
    fn cdf_is_monotone_and_symmetric(t in -50.0f64..50.0, dt in 1e-3f64..5.0, nu in 1.0f64..200.0) {
        let f = |x| student_t_cdf(x, nu).unwrap();
        prop_assert!(f(t + dt) >= f(t));
        prop_assert!((f(t) + f(-t) - 1.0).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&f(t)));
    }

    #[test]
    fn critical_value_inverts_cdf(alpha in 1e-5f64..0.5, nu in 1.0f64..150.0) {
        let t = critical_value(alpha, nu).unwrap();
        prop_assert!((1.0 - student_t_cdf(t, nu).unwrap() - alpha).abs() < 1e-10);
    }
}
