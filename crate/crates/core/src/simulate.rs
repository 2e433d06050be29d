//! Seeded synthetic datasets.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::{Column, Dataset, Factor};
use crate::fit::wood_curve;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One compound Poisson–gamma draw with mean `mu`, dispersion `phi` and
/// power `p` in (1, 2).
pub fn tweedie_draw<R: Rng>(rng: &mut R, mu: f64, phi: f64, p: f64) -> f64 {
    let lambda = mu.powf(2.0 - p) / (phi * (2.0 - p));
    let shape = (2.0 - p) / (p - 1.0);
    let scale = phi * (p - 1.0) * mu.powf(p - 1.0);
    let n = Poisson::new(lambda).map(|d| d.sample(rng)).unwrap_or(0.0) as u64;
    if n == 0 {
        0.0
    } else {
        Gamma::new(n as f64 * shape, scale).unwrap().sample(rng)
    }
}

/// y = sin(2π·freq·x) + N(0, σ²), x uniform on [0, 1].
pub fn sin_data(n: usize, sigma: f64, freq: f64, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let noise = Normal::new(0.0, sigma).unwrap();
    let x: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
    let y: Vec<f64> = x.iter().map(|&v| (2.0 * PI * freq * v).sin() + noise.sample(&mut r)).collect();
    Dataset::new(
        vec![("x".into(), Column::Numeric(x)), ("y".into(), Column::Numeric(y))],
        "y",
        None,
    )
    .expect("sin columns are consistent")
}

/// Positive Tweedie responses with log mean 0.5 + sin(2πx).
pub fn tweedie_data(n: usize, phi: f64, p: f64, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let x: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
    let y: Vec<f64> = x
        .iter()
        .map(|&v| tweedie_draw(&mut r, (0.5 + (2.0 * PI * v).sin()).exp(), phi, p))
        .collect();
    Dataset::new(
        vec![("x".into(), Column::Numeric(x)), ("y".into(), Column::Numeric(y))],
        "y",
        None,
    )
    .expect("tweedie columns are consistent")
}

/// Weekly milk-fat records following a Wood curve with multiplicative
/// gamma noise. `n` is the number of weeks, starting at week 1.
pub fn lactation_data(n: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let cv = 0.04;
    let g = Gamma::new(1.0 / (cv * cv), cv * cv).unwrap();
    let week: Vec<f64> = (1..=n).map(|w| w as f64).collect();
    let fat: Vec<f64> = week
        .iter()
        .map(|&t| wood_curve(4.8, -0.12, 0.008, t) * g.sample(&mut r))
        .collect();
    Dataset::new(
        vec![("week".into(), Column::Numeric(week)), ("fat".into(), Column::Numeric(fat))],
        "fat",
        None,
    )
    .expect("lactation columns are consistent")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthConfig {
    pub animals_per_cell: usize,
    pub treatments: Vec<String>,
    pub n_mothers: usize,
    pub days: Vec<f64>,
    /// Residual standard deviation on the gram scale.
    pub sigma: f64,
}

impl Default for GrowthConfig {
    fn default() -> Self {
        GrowthConfig {
            animals_per_cell: 4,
            treatments: ["CO", "T1", "T2", "T3", "T4"].map(String::from).to_vec(),
            n_mothers: 10,
            days: (0..=13).map(|i| (i * 6) as f64).collect(),
            sigma: 4.0,
        }
    }
}

/// Repeated body-mass measurements of individuals under treatments, with
/// sex-specific logistic growth, per-animal curve deviations and maternal
/// effects. Columns: day, weight, treat, sex, egg (individual), mother.
pub fn growth_data(cfg: &GrowthConfig, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let z = Normal::new(0.0, 1.0).unwrap();
    let mother_eff: Vec<f64> = (0..cfg.n_mothers.max(1)).map(|_| 6.0 * z.sample(&mut r)).collect();
    let (mut day, mut weight) = (Vec::new(), Vec::new());
    let (mut treat, mut sex, mut egg, mut mother) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut id = 0;
    for (ti, t) in cfg.treatments.iter().enumerate() {
        for s in ["F", "M"] {
            for _ in 0..cfg.animals_per_cell {
                id += 1;
                let m = (id - 1) % cfg.n_mothers.max(1);
                let asym = if s == "F" { 260.0 } else { 225.0 } + 2.0 * ti as f64 + 12.0 * z.sample(&mut r);
                let rate = 0.09 * (1.0 + 0.08 * z.sample(&mut r));
                let mid = 22.0 + 2.0 * z.sample(&mut r);
                for &d in &cfg.days {
                    let mean = 10.0 + asym / (1.0 + (-rate * (d - mid)).exp()) + mother_eff[m];
                    day.push(d);
                    weight.push(mean + cfg.sigma * z.sample(&mut r));
                    treat.push(t.clone());
                    sex.push(s.to_string());
                    egg.push(format!("E{id:03}"));
                    mother.push(format!("M{:02}", m + 1));
                }
            }
        }
    }
    let fac = |v: Vec<String>| Column::Factor(Factor::from_labels(&v));
    Dataset::new(
        vec![
            ("day".into(), Column::Numeric(day)),
            ("weight".into(), Column::Numeric(weight)),
            ("treat".into(), fac(treat)),
            ("sex".into(), fac(sex)),
            ("egg".into(), fac(egg)),
            ("mother".into(), fac(mother)),
        ],
        "weight",
        None,
    )
    .expect("growth columns are consistent")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tweedie_draws_have_target_mean_and_zero_mass() {
        let mut r = rng(7);
        let (mu, phi, p) = (1.0, 0.5, 1.5);
        let n = 200_000;
        let draws: Vec<f64> = (0..n).map(|_| tweedie_draw(&mut r, mu, phi, p)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let zeros = draws.iter().filter(|&&v| v == 0.0).count() as f64 / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
        // P(N = 0) = exp(−λ), λ = 1/(0.5·0.5) = 4.
        assert!((zeros - (-4.0f64).exp()).abs() < 0.002, "{zeros}");
    }

    #[test]
    fn same_seed_same_data() {
        assert_eq!(sin_data(50, 0.2, 1.0, 3), sin_data(50, 0.2, 1.0, 3));
        let g = GrowthConfig::default();
        assert_eq!(growth_data(&g, 1).n_rows(), 5 * 2 * 4 * 14);
    }
}
