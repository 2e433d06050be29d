use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use psgam::fit::{
    criterion_gradient, edf_at, fit_matrices, gcv_criterion, penalty_log_determinant, pirls_fit, reml_criterion,
    FitError,
};
use psgam::simulate::{rng, sin_data};
use psgam::{assemble_design, parse_formula, Column, Criterion, Dataset, Family, FitOptions, Link, ModelMatrices};
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn matrices(formula: &str, data: &Dataset) -> ModelMatrices {
    assemble_design(&parse_formula(formula).unwrap(), data).unwrap()
}

fn xy(x: Vec<f64>, y: Vec<f64>) -> Dataset {
    Dataset::new(vec![("x".into(), Column::Numeric(x)), ("y".into(), Column::Numeric(y))], "y", None).unwrap()
}

fn dense_solve(m: &ModelMatrices, y: &[f64], w: &[f64], lambdas: &[f64]) -> DVector<f64> {
    let wd = DMatrix::from_diagonal(&DVector::from_column_slice(w));
    let xt_w = m.x.transpose() * &wd;
    let a = &xt_w * &m.x + m.design.total_penalty(lambdas);
    let b = xt_w * DVector::from_column_slice(y);
    a.lu().solve(&b).unwrap()
}

fn truth_rmse(data: &Dataset, fitted: &[f64], f: impl Fn(f64) -> f64) -> f64 {
    let x = data.numeric("x").unwrap();
    (x.iter().zip(fitted).map(|(&xi, &m)| (m - f(xi)).powi(2)).sum::<f64>() / x.len() as f64).sqrt()
}

fn sin2pi(x: f64) -> f64 {
    (2.0 * PI * x).sin()
}

#[test]
fn gaussian_identity_converges_in_one_iteration() {
    let data = sin_data(80, 0.2, 1.0, 11);
    let m = matrices("y ~ s(x, k=8)", &data);
    let fit = pirls_fit(&m, Family::gaussian(), &[0.7], &data).unwrap();
    assert_eq!(fit.iterations, 1);
    assert!(fit.converged);
    let direct = dense_solve(&m, data.response(), &data.weights(), &[0.7]);
    assert!((&fit.beta - direct).amax() < 1e-8);
}

#[test]
fn pirls_matches_dense_solve_on_random_problems() {
    let mut r = rng(2024);
    for case in 0..50 {
        let n = r.random_range(15..=30);
        let k = r.random_range(4..=6);
        let x: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
        let y: Vec<f64> = x.iter().map(|&v| (3.0 * v).cos() + 0.3 * r.random::<f64>()).collect();
        let w: Vec<f64> = (0..n).map(|_| r.random_range(0.5..2.0)).collect();
        let data = Dataset::new(
            vec![
                ("x".into(), Column::Numeric(x)),
                ("y".into(), Column::Numeric(y)),
                ("w".into(), Column::Numeric(w.clone())),
            ],
            "y",
            Some("w".into()),
        )
        .unwrap();
        let bs = if case % 2 == 0 { "tp" } else { "bs" };
        let m = matrices(&format!("y ~ s(x, k={k}, bs={bs})"), &data);
        assert!(m.design.n_coef <= 8);
        let lambda = 10f64.powf(r.random_range(-4.0..3.0));
        let fit = pirls_fit(&m, Family::gaussian(), &[lambda], &data).unwrap();
        let direct = dense_solve(&m, data.response(), &w, &[lambda]);
        let scale = direct.amax().max(1.0);
        assert!((&fit.beta - &direct).amax() / scale < 1e-8, "case {case}");
    }
}

/// Unpenalized Fisher scoring for a log-link gamma GLM.
fn gamma_log_irls(x: &DMatrix<f64>, y: &[f64]) -> DVector<f64> {
    let n = y.len();
    let ybar = y.iter().sum::<f64>() / n as f64;
    let mut beta = DVector::zeros(x.ncols());
    beta[0] = ybar.ln();
    for _ in 0..100 {
        let eta = x * &beta;
        // Log link with gamma variance gives unit working weights.
        let z = DVector::from_fn(n, |i, _| eta[i] + (y[i] - eta[i].exp()) / eta[i].exp());
        let next = (x.transpose() * x).lu().solve(&(x.transpose() * z)).unwrap();
        if (&next - &beta).amax() < 1e-14 {
            return next;
        }
        beta = next;
    }
    beta
}

#[test]
fn zero_penalty_gamma_matches_unpenalized_glm() {
    let mut r = rng(5);
    let n = 60;
    let x: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
    let y: Vec<f64> = x.iter().map(|&v| (1.0 + v).exp() * r.random_range(0.6..1.4)).collect();
    let data = xy(x, y);
    let m = matrices("y ~ s(x, k=5)", &data);
    let fit = pirls_fit(&m, Family::gamma(Link::Log), &[0.0], &data).unwrap();
    let oracle = gamma_log_irls(&m.x, data.response());
    assert!((&fit.beta - oracle).amax() < 1e-8);
}

#[test]
fn gamma_fit_solves_penalized_normal_equations() {
    let mut r = rng(8);
    let n = 40;
    let x: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
    let y: Vec<f64> = x.iter().map(|&v| (sin2pi(v) + 2.0).exp() * r.random_range(0.7..1.3)).collect();
    let data = xy(x, y);
    let m = matrices("y ~ s(x, k=6)", &data);
    let w = data.weights();
    let problem = psgam::fit::Problem::new(&m.design, &m.x, data.response(), &w, Family::gamma(Link::Log)).unwrap();
    let fit = problem.fit(&[0.3], None).unwrap();
    assert!(fit.normal_equation_residual(&problem, &[0.3]) < 1e-8);
    for i in 0..n {
        assert!((fit.mu[i] - fit.eta[i].exp()).abs() < 1e-12 * fit.mu[i]);
    }
}

#[test]
fn huge_penalty_leaves_centred_ols_line() {
    let data = sin_data(100, 0.2, 1.0, 3);
    let x = data.numeric("x").unwrap().to_vec();
    let y = data.response().to_vec();
    let n = x.len() as f64;
    let (xm, ym) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - xm) * (b - ym)).sum();
    let sxx: f64 = x.iter().map(|a| (a - xm).powi(2)).sum();
    let slope = sxy / sxx;
    for bs in ["tp", "bs"] {
        let m = matrices(&format!("y ~ s(x, k=10, bs={bs})"), &data);
        let fit = pirls_fit(&m, Family::gaussian(), &[1e8], &data).unwrap();
        let t = &m.design.terms[1];
        let f = m.x.columns(t.start, t.end - t.start) * fit.beta.rows(t.start, t.end - t.start);
        for i in 0..x.len() {
            assert!((f[i] - slope * (x[i] - xm)).abs() < 1e-4, "{bs}: row {i}");
        }
    }
}

#[test]
fn gcv_degenerates_for_interpolating_basis() {
    let x: Vec<f64> = (0..10).map(|i| i as f64 / 9.0).collect();
    let y: Vec<f64> = x.iter().map(|&v| sin2pi(v) + 0.1 * v * v).collect();
    let data = xy(x, y);
    let m = matrices("y ~ s(x, k=9)", &data);
    assert_eq!(m.design.n_coef, 10);
    let err = gcv_criterion(&m, Family::gaussian(), &[0.0], &data).unwrap_err();
    assert!(matches!(err, FitError::DegenerateGcv { .. }), "{err}");
    assert_eq!(err.kind(), "degenerate_gcv");
}

fn positive_logdet(s: &DMatrix<f64>) -> (f64, usize) {
    let e = s.clone().symmetric_eigen();
    let max = e.eigenvalues.amax();
    e.eigenvalues
        .iter()
        .filter(|&&v| v > 1e-9 * max)
        .fold((0.0, 0), |(a, r), &v| (a + v.ln(), r + 1))
}

#[test]
fn penalty_log_determinant_matches_eigenvalues_and_shifts_by_rank() {
    let data = sin_data(60, 0.2, 1.0, 4);
    let m = matrices("y ~ s(x, k=8)", &data);
    let (ld, rank) = penalty_log_determinant(&m.design, &[2.5]);
    let (oracle, oracle_rank) = positive_logdet(&m.design.total_penalty(&[2.5]));
    assert_eq!(rank, oracle_rank);
    assert!((ld - oracle).abs() < 1e-8);
    let c = 7.0f64;
    let (ld_c, _) = penalty_log_determinant(&m.design, &[2.5 * c]);
    assert!((ld_c - ld - rank as f64 * c.ln()).abs() < 1e-9);
}

#[test]
fn gcv_grid_minimizer_recovers_sine() {
    let data = sin_data(100, 0.2, 1.0, 17);
    let m = matrices("y ~ s(x, k=10)", &data);
    let mut best = (f64::INFINITY, 0.0);
    for i in 0..=80 {
        let lambda = 10f64.powf(-8.0 + 0.15 * i as f64);
        let g = gcv_criterion(&m, Family::gaussian(), &[lambda], &data).unwrap();
        if g < best.0 {
            best = (g, lambda);
        }
    }
    let fit = pirls_fit(&m, Family::gaussian(), &[best.1], &data).unwrap();
    let mu: Vec<f64> = fit.mu.iter().copied().collect();
    assert!(truth_rmse(&data, &mu, sin2pi) < 0.1);
}

#[test]
fn reml_and_gcv_recover_sine() {
    let data = sin_data(200, 0.2, 1.0, 42);
    let m = matrices("y ~ s(x, k=10)", &data);
    for crit in [Criterion::Reml, Criterion::Gcv] {
        let model = fit_matrices(&m, &data, Family::gaussian(), &FitOptions::criterion(crit)).unwrap();
        let rmse = truth_rmse(&data, &model.fitted, sin2pi);
        assert!(rmse < 0.08, "{crit}: {rmse}");
        let g = criterion_gradient(&m, &data, &model).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-2), "{crit}: {g:?}");
    }
}

#[test]
fn reml_gradient_vanishes_for_two_smooths() {
    let mut r = rng(9);
    let noise = Normal::new(0.0, 0.3).unwrap();
    let n = 200;
    let x: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
    let z: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
    let y: Vec<f64> = (0..n).map(|i| sin2pi(x[i]) + (z[i] - 0.5).powi(2) * 4.0 + noise.sample(&mut r)).collect();
    let data = Dataset::new(
        vec![("x".into(), Column::Numeric(x)), ("z".into(), Column::Numeric(z)), ("y".into(), Column::Numeric(y))],
        "y",
        None,
    )
    .unwrap();
    let m = matrices("y ~ s(x, k=10) + s(z, k=8, bs=bs)", &data);
    let model = fit_matrices(&m, &data, Family::gaussian(), &FitOptions::default()).unwrap();
    let g = criterion_gradient(&m, &data, &model).unwrap();
    assert!(g.iter().all(|v| v.abs() < 1e-2), "{g:?}");
    let by_term: f64 = model.edf_by_term.iter().sum();
    assert!((by_term - model.edf_total).abs() < 1e-10);
}

#[test]
fn edf_limits_and_monotonicity() {
    let data = sin_data(120, 0.2, 1.0, 6);
    let m = matrices("y ~ s(x, k=10)", &data);
    let fam = Family::gaussian();
    let hi = edf_at(&m, fam, &[1e14], &data).unwrap();
    assert!((hi - m.design.null_space_dim() as f64).abs() < 0.01, "{hi}");
    assert_eq!(m.design.null_space_dim(), 2);
    let lo = edf_at(&m, fam, &[0.0], &data).unwrap();
    assert!((lo - m.design.n_coef as f64).abs() < 0.01, "{lo}");
    let mut prev = f64::INFINITY;
    for i in 0..40 {
        let e = edf_at(&m, fam, &[10f64.powf(-6.0 + 0.3 * i as f64)], &data).unwrap();
        assert!(e <= prev + 1e-10);
        prev = e;
    }
}

#[test]
fn edf_monotone_in_each_lambda_of_two() {
    let mut r = rng(31);
    let n = 150;
    let x: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
    let z: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
    let y: Vec<f64> = (0..n).map(|i| sin2pi(x[i]) * z[i] + r.random::<f64>()).collect();
    let data = Dataset::new(
        vec![("x".into(), Column::Numeric(x)), ("z".into(), Column::Numeric(z)), ("y".into(), Column::Numeric(y))],
        "y",
        None,
    )
    .unwrap();
    let m = matrices("y ~ s(x, k=8) + s(z, k=8)", &data);
    for j in 0..2 {
        let mut prev = f64::INFINITY;
        for i in 0..25 {
            let mut l = [0.5, 0.5];
            l[j] = 10f64.powf(-5.0 + 0.4 * i as f64);
            let e = edf_at(&m, Family::gaussian(), &l, &data).unwrap();
            assert!(e <= prev + 1e-10);
            prev = e;
        }
    }
}

#[test]
fn scaling_weights_leaves_coefficients_unchanged() {
    let base = sin_data(100, 0.3, 1.0, 12);
    let mut r = rng(13);
    let w: Vec<f64> = (0..100).map(|_| r.random_range(1.0..5.0)).collect();
    let with_w = |c: f64| {
        Dataset::new(
            vec![
                ("x".into(), Column::Numeric(base.numeric("x").unwrap().to_vec())),
                ("y".into(), Column::Numeric(base.response().to_vec())),
                ("w".into(), Column::Numeric(w.iter().map(|v| v * c).collect())),
            ],
            "y",
            Some("w".into()),
        )
        .unwrap()
    };
    let (d1, d3) = (with_w(1.0), with_w(3.0));
    let (m1, m3) = (matrices("y ~ s(x, k=10)", &d1), matrices("y ~ s(x, k=10)", &d3));
    // Fixed λ: scaling λ with the weights gives the same penalized solve.
    let f1 = pirls_fit(&m1, Family::gaussian(), &[0.8], &d1).unwrap();
    let f3 = pirls_fit(&m3, Family::gaussian(), &[2.4], &d3).unwrap();
    assert!((&f1.beta - &f3.beta).amax() < 1e-8);
    // Smoothness selection finds that rescaled λ by itself.
    let opts = FitOptions::default();
    let a = fit_matrices(&m1, &d1, Family::gaussian(), &opts).unwrap();
    let b = fit_matrices(&m3, &d3, Family::gaussian(), &opts).unwrap();
    let scale = a.beta.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    for (p, q) in a.beta.iter().zip(&b.beta) {
        assert!((p - q).abs() < 1e-6 * scale, "{p} vs {q}");
    }
    assert!((b.phi / a.phi - 3.0).abs() < 1e-4);
}

#[test]
fn recovery_improves_with_sample_size() {
    let mut errs = Vec::new();
    for n in [100, 200, 400] {
        let mut total = 0.0;
        for seed in 0..8 {
            let data = sin_data(n, 0.3, 1.0, 100 + seed);
            let model = psgam::fit_gam(
                &parse_formula("y ~ s(x, k=10)").unwrap(),
                &data,
                Family::gaussian(),
                &FitOptions::default(),
            )
            .unwrap();
            total += truth_rmse(&data, &model.fitted, sin2pi);
        }
        errs.push(total / 8.0);
    }
    assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
}

#[test]
fn random_intercept_matches_one_way_shrinkage() {
    let (groups, per) = (8, 6);
    let mut r = rng(77);
    let between = Normal::new(0.0, 1.5).unwrap();
    let within = Normal::new(0.0, 1.0).unwrap();
    let mut y = Vec::new();
    let mut g = Vec::new();
    for j in 0..groups {
        let b = between.sample(&mut r);
        for _ in 0..per {
            y.push(10.0 + b + within.sample(&mut r));
            g.push(format!("g{j}"));
        }
    }
    let data = Dataset::new(
        vec![
            ("y".into(), Column::Numeric(y.clone())),
            ("g".into(), Column::Factor(psgam::Factor::from_labels(&g))),
        ],
        "y",
        None,
    )
    .unwrap();
    let m = matrices("y ~ ri(g)", &data);
    let model = fit_matrices(&m, &data, Family::gaussian(), &FitOptions::default()).unwrap();

    // Balanced one-way ANOVA: REML variance components equal the ANOVA ones.
    let n = (groups * per) as f64;
    let grand = y.iter().sum::<f64>() / n;
    let means: Vec<f64> = (0..groups).map(|j| y[j * per..(j + 1) * per].iter().sum::<f64>() / per as f64).collect();
    let ssw: f64 = (0..groups)
        .map(|j| y[j * per..(j + 1) * per].iter().map(|v| (v - means[j]).powi(2)).sum::<f64>())
        .sum();
    let ssb: f64 = means.iter().map(|mj| per as f64 * (mj - grand).powi(2)).sum();
    let msw = ssw / (n - groups as f64);
    let msb = ssb / (groups as f64 - 1.0);
    let s2b = (msb - msw) / per as f64;
    assert!(s2b > 0.0);
    let shrink = s2b / (s2b + msw / per as f64);
    let t = &model.design.terms[1];
    assert!((model.beta[0] - grand).abs() < 1e-4);
    for j in 0..groups {
        let b = model.beta[t.start + j];
        assert!((b - shrink * (means[j] - grand)).abs() < 1e-4, "level {j}: {b}");
    }
}

#[test]
fn reml_criterion_is_finite_for_gamma_and_tweedie() {
    let mut r = rng(21);
    let x: Vec<f64> = (0..80).map(|_| r.random::<f64>()).collect();
    let y: Vec<f64> = x.iter().map(|&v| (1.0 + sin2pi(v)).exp() * r.random_range(0.5..1.5)).collect();
    let data = xy(x, y);
    let m = matrices("y ~ s(x, k=8)", &data);
    for fam in [Family::gamma(Link::Log), Family::tweedie(Link::Log, Some(1.5)).unwrap()] {
        let v = reml_criterion(&m, fam, &[1.0], &data).unwrap();
        assert!(v.is_finite());
    }
}
