use proptest::prelude::*;
use psgam::family::{tweedie_log_density, tweedie_series};
use psgam::fit::FitOptions;
use psgam::simulate::{lactation_data, tweedie_data};
use psgam::{fit_gam, parse_formula, Family, Link};

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

#[test]
fn tweedie_density_integrates_to_one() {
    let (mu, phi, p) = (1.0f64, 0.5, 1.5);
    let lambda = mu.powf(2.0 - p) / (phi * (2.0 - p));
    let mass0 = (-lambda).exp();
    assert!((tweedie_log_density(0.0, mu, phi, p).unwrap() - (-lambda)).abs() < 1e-14);
    let f = |y: f64| tweedie_log_density(y, mu, phi, p).unwrap().exp();
    // The continuous part has a finite limit at 0, so start just above it.
    let cont = simpson(f, 1e-12, 1.0, 20_000) + simpson(f, 1.0, 20.0, 40_000);
    assert!((cont + mass0 - 1.0).abs() < 1e-4, "{}", cont + mass0);
}

#[test]
fn tweedie_near_two_approaches_gamma() {
    // Gamma with the same mean and variance φ μ^p at y = μ = 1, φ = 0.3.
    let (y, mu, phi, p) = (1.0f64, 1.0f64, 0.3f64, 1.99f64);
    let shape = mu.powf(2.0 - p) / phi;
    let rate = shape / mu;
    let gamma = shape * rate.ln() - statrs::function::gamma::ln_gamma(shape) + (shape - 1.0) * y.ln() - rate * y;
    let tw = tweedie_log_density(y, mu, phi, p).unwrap();
    assert!((tw - gamma).abs() < 1e-2, "{tw} vs {gamma}");
}

#[test]
fn doubling_the_window_changes_nothing() {
    for &(y, mu, phi, p) in &[(0.3, 1.0, 0.5, 1.5), (4.0, 2.0, 1.2, 1.3), (12.0, 5.0, 0.2, 1.8), (0.01, 0.1, 2.0, 1.1)] {
        let a = tweedie_series(y, mu, phi, p, 0).unwrap();
        let b = tweedie_series(y, mu, phi, p, 1).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn gamma_fit_on_under_dispersed_data() {
    let data = lactation_data(44, 3);
    let f = parse_formula("fat ~ s(week, k=9)").unwrap();
    let m = fit_gam(&f, &data, Family::gamma(Link::Log), &FitOptions::default()).unwrap();
    // φ̂ is the Pearson statistic over the residual degrees of freedom.
    assert!(m.phi < 1.0, "{}", m.phi);
}

#[test]
fn profile_likelihood_recovers_tweedie_power() {
    let true_p = 1.6;
    let data = tweedie_data(500, 0.8, true_p, 99);
    let f = parse_formula("y ~ s(x, k=10)").unwrap();
    let m = fit_gam(&f, &data, Family::tweedie(Link::Log, None).unwrap(), &FitOptions::default()).unwrap();
    let p = m.power().unwrap();
    assert!((p - true_p).abs() < 0.15, "{p}");
    assert!(m.power_profile.len() >= 19);
    let best = m.power_profile.iter().cloned().fold(f64::NEG_INFINITY, |a, (_, l)| a.max(l));
    assert!((m.log_likelihood - best).abs() < 1.0 || m.log_likelihood >= best);
}

proptest! {
    #[test]
    fn deviance_matches_density_gaussian(y in -50.0f64..50.0, mu in -50.0f64..50.0, phi in 0.01f64..20.0) {
        let fam = Family::gaussian();
        let lhs = -2.0 * (fam.log_density(y, mu, phi).unwrap() - fam.log_density(y, y, phi).unwrap());
        let rhs = fam.unit_deviance(y, mu).unwrap() / phi;
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + rhs.abs()));
    }

    #[test]
    fn deviance_matches_density_gamma(y in 0.01f64..100.0, mu in 0.01f64..100.0, phi in 0.01f64..5.0) {
        let fam = Family::gamma(Link::Log);
        let lhs = -2.0 * (fam.log_density(y, mu, phi).unwrap() - fam.log_density(y, y, phi).unwrap());
        let rhs = fam.unit_deviance(y, mu).unwrap() / phi;
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + rhs.abs()));
    }

    #[test]
    fn tweedie_density_is_finite(y in 0.0f64..50.0, mu in 0.05f64..20.0, phi in 0.05f64..5.0, p in 1.05f64..1.95) {
        let v = tweedie_log_density(y, mu, phi, p).unwrap();
        prop_assert!(v.is_finite());
        let w = tweedie_series(y, mu, phi, p, 1).unwrap();
        prop_assert!((v - w).abs() < 1e-12 * (1.0 + v.abs()));
    }
}
