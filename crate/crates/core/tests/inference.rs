use std::f64::consts::PI;

use proptest::prelude::*;
use psgam::design::GridColumn;
use psgam::inference::{
    adjust_bh, adjust_by, contrast, kcheck, pairwise_contrasts, predict, slope, summarize, term_contributions,
    term_test, ContrastQuantity, PredictionRequest, Scale,
};
use psgam::simulate::{growth_data, rng, sin_data, GrowthConfig};
use psgam::{fit_gam, parse_formula, Column, Dataset, Factor, Family, FitOptions, FittedModel, Grid, Link};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

fn fit(formula: &str, data: &Dataset) -> FittedModel {
    fit_gam(&parse_formula(formula).unwrap(), data, Family::gaussian(), &FitOptions::default()).unwrap()
}

fn xgrid(x: Vec<f64>) -> Grid {
    Grid::new(vec![("x".into(), GridColumn::Numeric(x))]).unwrap()
}

#[test]
fn intercept_only_prediction_is_mean_with_classical_se() {
    let data = sin_data(40, 0.5, 1.0, 1);
    let m = fit("y ~ 1", &data);
    let y = data.response();
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let p = predict(&m, &PredictionRequest::new(xgrid(vec![0.1, 0.9]))).unwrap();
    for i in 0..2 {
        assert!((p.fit[i] - mean).abs() < 1e-12);
        assert!((p.se[i] - sd / n.sqrt()).abs() < 1e-12);
    }
    assert!(summarize(&m).deviance_explained.abs() < 1e-12);
}

#[test]
fn training_predictions_reproduce_fitted_values() {
    let data = sin_data(150, 0.2, 1.0, 2);
    let m = fit("y ~ s(x, k=10)", &data);
    let p = predict(&m, &PredictionRequest::new(Grid::from_dataset(&data))).unwrap();
    for i in 0..150 {
        assert!((p.fit[i] - m.fitted[i]).abs() < 1e-10);
    }
}

#[test]
fn credible_bounds_map_through_inverse_link() {
    let mut r = rng(3);
    let x: Vec<f64> = (0..120).map(|_| r.random::<f64>()).collect();
    let y: Vec<f64> = x.iter().map(|&v| (1.0 + (2.0 * PI * v).sin()).exp() * r.random_range(0.7..1.3)).collect();
    let data = Dataset::new(vec![("x".into(), Column::Numeric(x)), ("y".into(), Column::Numeric(y))], "y", None).unwrap();
    let m = fit_gam(&parse_formula("y ~ s(x)").unwrap(), &data, Family::gamma(Link::Log), &FitOptions::default()).unwrap();
    let g = xgrid(vec![0.2, 0.5, 0.8]);
    let mut req = PredictionRequest::new(g);
    req.scale = Scale::Link;
    let link = predict(&m, &req).unwrap();
    req.scale = Scale::Response;
    let resp = predict(&m, &req).unwrap();
    for i in 0..3 {
        assert!((link.upper[i] - link.fit[i] - 1.959963984540054 * link.se[i]).abs() < 1e-12);
        assert!((resp.fit[i] - link.fit[i].exp()).abs() < 1e-12);
        assert!((resp.lower[i] - link.lower[i].exp()).abs() < 1e-12);
        assert!((resp.upper[i] - link.upper[i].exp()).abs() < 1e-12);
    }
}

fn growth_model(formula: &str) -> (Dataset, FittedModel) {
    let cfg = GrowthConfig {
        animals_per_cell: 3,
        ..GrowthConfig::default()
    };
    let data = growth_data(&cfg, 5);
    let m = fit(formula, &data);
    (data, m)
}

#[test]
fn exclusion_is_subtraction_on_the_link_scale() {
    let (data, m) = growth_model("weight ~ s(day, k=8) + sz(day, sex) + ri(mother)");
    let grid = Grid::from_dataset(&data);
    let mut req = PredictionRequest::new(grid.clone());
    req.scale = Scale::Link;
    let full = predict(&m, &req).unwrap();
    req.exclude = vec!["ri(mother)".into()];
    let reduced = predict(&m, &req).unwrap();
    let contrib = term_contributions(&m, &grid, "ri(mother)").unwrap();
    for i in 0..full.fit.len() {
        assert!((full.fit[i] - contrib[i] - reduced.fit[i]).abs() < 1e-10);
    }
    req.exclude = vec!["nonexistent".into()];
    assert_eq!(predict(&m, &req).unwrap_err().kind(), "unknown_term");
}

#[test]
fn excluded_factor_needs_no_real_level() {
    let (_, m) = growth_model("weight ~ s(day, k=8) + ri(mother)");
    let grid = Grid::new(vec![
        ("day".into(), GridColumn::Numeric(vec![10.0, 40.0])),
        ("mother".into(), GridColumn::Labels(vec!["anything".into(), "else".into()])),
    ])
    .unwrap();
    let mut req = PredictionRequest::new(grid);
    req.exclude = vec!["ri(mother)".into()];
    assert!(predict(&m, &req).is_ok());
}

#[test]
fn slope_of_a_line_is_its_coefficient() {
    let mut r = rng(4);
    let x: Vec<f64> = (0..50).map(|_| r.random_range(0.0..10.0)).collect();
    let y: Vec<f64> = x.iter().map(|&v| 2.0 - 0.75 * v + r.random::<f64>()).collect();
    let data = Dataset::new(vec![("x".into(), Column::Numeric(x.clone())), ("y".into(), Column::Numeric(y))], "y", None).unwrap();
    let m = fit("y ~ 1 + x", &data);
    let s = slope(&m, &xgrid(vec![1.0, 5.0, x.iter().cloned().fold(f64::MIN, f64::max)]), "x", &[]).unwrap();
    for v in &s {
        assert!((v.slope - m.beta[1]).abs() < 1e-8);
        assert!((v.se - m.vbeta[(1, 1)].sqrt()).abs() < 1e-8);
    }
}

#[test]
fn slope_is_step_robust() {
    // Central differences err by about f'''·h²/6. The penalty controls f''
    // only, so the fitted f''' can be large even for a gentle curve; the
    // check is a 1e-5 relative change on halving h plus second-order
    // convergence of the differences.
    let mut r = rng(8);
    let x: Vec<f64> = (0..200).map(|_| r.random::<f64>()).collect();
    let y: Vec<f64> = x.iter().map(|&v| v.exp() + 0.1 * (r.random::<f64>() - 0.5)).collect();
    let data = Dataset::new(vec![("x".into(), Column::Numeric(x)), ("y".into(), Column::Numeric(y))], "y", None).unwrap();
    let m = fit("y ~ s(x, k=10)", &data);
    let xs = &m.covariates["x"];
    let (lo, hi) = (xs.iter().cloned().fold(f64::MAX, f64::min), xs.iter().cloned().fold(f64::MIN, f64::max));
    let h = (hi - lo) / 1000.0;
    let fd = |x0: f64, h: f64| {
        let p = predict(&m, &PredictionRequest::new(xgrid(vec![x0 - h, x0 + h]))).unwrap();
        (p.fit[1] - p.fit[0]) / (2.0 * h)
    };
    for &x0 in &[0.2, 0.45, 0.7] {
        let s = slope(&m, &xgrid(vec![x0]), "x", &[]).unwrap()[0].slope;
        assert!((s - fd(x0, h)).abs() < 1e-12);
        let (d1, d2) = (s - fd(x0, h / 2.0), fd(x0, h / 2.0) - fd(x0, h / 4.0));
        assert!(d1.abs() < 1e-5 * s.abs(), "{s}: {d1}");
        assert!((d1 / d2 - 4.0).abs() < 0.5, "{}", d1 / d2);
    }
}

#[test]
fn slope_with_everything_excluded_is_zero() {
    let (_, m) = growth_model("weight ~ s(day, k=8) + ri(mother)");
    let g = Grid::new(vec![
        ("day".into(), GridColumn::Numeric(vec![20.0, 50.0])),
        ("mother".into(), GridColumn::Labels(vec!["M01".into(), "M02".into()])),
    ])
    .unwrap();
    let s = slope(&m, &g, "day", &["s(day)".into(), "ri(mother)".into()]).unwrap();
    assert!(s.iter().all(|v| v.slope == 0.0 && v.se == 0.0));
    let s = slope(&m, &g, "day", &["ri(mother)".into()]).unwrap();
    assert!(s.iter().all(|v| v.slope.is_finite()));
}

#[test]
fn slope_outside_support_is_extrapolation() {
    let data = sin_data(60, 0.2, 1.0, 9);
    let m = fit("y ~ s(x)", &data);
    let err = slope(&m, &xgrid(vec![3.0]), "x", &[]).unwrap_err();
    assert_eq!(err.kind(), "extrapolation");
}

#[test]
fn contrasts_are_exactly_antisymmetric() {
    let (_, m) = growth_model("weight ~ s(day, k=8) + sz(day, treat, sex) + ri(mother)");
    let row = |t: &str| {
        Grid::new(vec![
            ("day".into(), GridColumn::Numeric(vec![40.0])),
            ("treat".into(), GridColumn::Labels(vec![t.into()])),
            ("sex".into(), GridColumn::Labels(vec!["F".into()])),
            ("mother".into(), GridColumn::Labels(vec!["M01".into()])),
        ])
        .unwrap()
    };
    let ex = ["ri(mother)".to_string()];
    for q in [ContrastQuantity::Mean, ContrastQuantity::Slope { wrt: "day".into() }] {
        let ab = contrast(&m, &row("CO"), &row("T3"), &q, &ex).unwrap();
        let ba = contrast(&m, &row("T3"), &row("CO"), &q, &ex).unwrap();
        assert_eq!(ab.estimate, -ba.estimate);
        assert_eq!(ab.z, -ba.z);
        assert_eq!(ab.se, ba.se);
        assert_eq!(ab.p_raw, ba.p_raw);
        let same = contrast(&m, &row("T2"), &row("T2"), &q, &ex).unwrap();
        assert_eq!((same.estimate, same.z, same.p_raw), (0.0, 0.0, 1.0));
    }
}

#[test]
fn pairwise_family_is_twenty_comparisons_within_sex() {
    let (_, m) = growth_model("weight ~ s(day, k=8) + sz(day, treat, sex) + ri(mother)");
    let out = pairwise_contrasts(&m, &[("day".into(), 60.0)], "treat", Some("sex"), &ContrastQuantity::Mean, &["ri(mother)".into()])
        .unwrap();
    assert_eq!(out.len(), 20);
    let raw: Vec<f64> = out.iter().map(|c| c.p_raw).collect();
    let by = adjust_by(&raw);
    for (c, q) in out.iter().zip(by) {
        assert_eq!(c.p_adjusted, q);
        assert!(c.p_adjusted >= c.p_raw && c.p_adjusted <= 1.0);
        assert!((c.ci_upper - c.estimate - 1.959963984540054 * c.se).abs() < 1e-9);
    }
    assert_eq!(out[0].hypothesis, "T1 - CO");
    let missing = pairwise_contrasts(&m, &[("day".into(), 60.0)], "treat", Some("sex"), &ContrastQuantity::Mean, &[]);
    assert_eq!(missing.unwrap_err().kind(), "request");
}

#[test]
fn single_level_factor_has_nothing_to_compare() {
    let mut r = rng(10);
    let n = 60;
    let x: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
    let y: Vec<f64> = x.iter().map(|&v| v + r.random::<f64>()).collect();
    let g = vec!["a"; n];
    let data = Dataset::new(
        vec![
            ("x".into(), Column::Numeric(x)),
            ("y".into(), Column::Numeric(y)),
            ("g".into(), Column::Factor(Factor::from_labels(&g))),
        ],
        "y",
        None,
    )
    .unwrap();
    let m = fit("y ~ s(x, k=5) + ri(g)", &data);
    let err = pairwise_contrasts(&m, &[("x".into(), 0.5)], "g", None, &ContrastQuantity::Mean, &[]).unwrap_err();
    assert_eq!(err.kind(), "nothing_to_compare");
}

#[test]
fn large_true_gap_survives_adjustment() {
    let mut r = rng(11);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let n = 100;
    let g: Vec<&str> = (0..n).map(|i| if i % 2 == 0 { "a" } else { "b" }).collect();
    let x: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
    let y: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 0.0 } else { 5.0 } + noise.sample(&mut r)).collect();
    let data = Dataset::new(
        vec![
            ("x".into(), Column::Numeric(x)),
            ("y".into(), Column::Numeric(y)),
            ("g".into(), Column::Factor(Factor::from_labels(&g))),
        ],
        "y",
        None,
    )
    .unwrap();
    let m = fit("y ~ 1 + g", &data);
    let out = pairwise_contrasts(&m, &[], "g", None, &ContrastQuantity::Mean, &[]).unwrap();
    assert_eq!(out.len(), 1);
    assert!(out[0].p_adjusted < 1e-3);
    assert!((out[0].estimate - 5.0).abs() < 0.6);
}

#[test]
fn zero_block_gives_unit_p() {
    let data = sin_data(100, 0.3, 1.0, 12);
    let mut m = fit("y ~ s(x, k=8)", &data);
    let t = m.design.terms[1].range();
    for i in t {
        m.beta[i] = 0.0;
    }
    let tt = term_test(&m, "s(x)").unwrap();
    assert_eq!(tt.statistic, 0.0);
    assert_eq!(tt.p, 1.0);
    assert_eq!(term_test(&m, "s(z)").unwrap_err().kind(), "unknown_term");
}

fn ks_uniform(mut p: Vec<f64>) -> f64 {
    p.sort_by(f64::total_cmp);
    let n = p.len() as f64;
    p.iter()
        .enumerate()
        .map(|(i, &v)| (v - i as f64 / n).abs().max(((i + 1) as f64 / n - v).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn term_test_is_calibrated_under_the_null() {
    let p: Vec<f64> = (0..500u64)
        .into_par_iter()
        .map(|rep| {
            let mut data = sin_data(100, 1.0, 1.0, 10_000 + rep);
            // Replace the signal by pure noise.
            let mut r = rng(20_000 + rep);
            let z = Normal::new(0.0, 1.0).unwrap();
            let y: Vec<f64> = (0..100).map(|_| z.sample(&mut r)).collect();
            data = Dataset::new(
                vec![("x".into(), Column::Numeric(data.numeric("x").unwrap().to_vec())), ("y".into(), Column::Numeric(y))],
                "y",
                None,
            )
            .unwrap();
            let m = fit_gam(
                &parse_formula("y ~ s(x, k=10)").unwrap(),
                &data,
                Family::gaussian(),
                &FitOptions { parallel: false, ..FitOptions::default() },
            )
            .unwrap();
            term_test(&m, "s(x)").unwrap().p
        })
        .collect();
    let d = ks_uniform(p);
    assert!(d < 0.08, "KS distance {d}");
}

#[test]
fn pointwise_intervals_cover_truth() {
    let n = 100;
    let x: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
    // Truth in the basis span: a smooth fitted to a noiseless curve.
    let base = Dataset::new(
        vec![
            ("x".into(), Column::Numeric(x.clone())),
            ("y".into(), Column::Numeric(x.iter().map(|&v| (2.0 * PI * v).sin() + v).collect())),
        ],
        "y",
        None,
    )
    .unwrap();
    let truth_model = fit("y ~ s(x, k=10)", &base);
    let truth: Vec<f64> = truth_model.fitted.clone();
    let rates: Vec<f64> = (0..200u64)
        .into_par_iter()
        .map(|rep| {
            let mut r = rng(30_000 + rep);
            let z = Normal::new(0.0, 0.3).unwrap();
            let y: Vec<f64> = truth.iter().map(|t| t + z.sample(&mut r)).collect();
            let d = Dataset::new(vec![("x".into(), Column::Numeric(x.clone())), ("y".into(), Column::Numeric(y))], "y", None).unwrap();
            let m = fit_gam(
                &parse_formula("y ~ s(x, k=10)").unwrap(),
                &d,
                Family::gaussian(),
                &FitOptions { parallel: false, ..FitOptions::default() },
            )
            .unwrap();
            let mut req = PredictionRequest::new(Grid::from_dataset(&d));
            req.scale = Scale::Link;
            let p = predict(&m, &req).unwrap();
            (0..n).filter(|&i| p.lower[i] <= truth[i] && truth[i] <= p.upper[i]).count() as f64 / n as f64
        })
        .collect();
    let cover = rates.iter().sum::<f64>() / rates.len() as f64;
    assert!((0.88..=0.99).contains(&cover), "{cover}");
}

#[test]
fn kcheck_flags_small_basis_and_clears_with_larger() {
    let data = sin_data(400, 0.2, 2.0, 13);
    let small = fit("y ~ s(x, k=4)", &data);
    let kc = kcheck(&small, 1);
    assert_eq!(kc.len(), 1);
    assert!(kc[0].flagged && kc[0].p < 0.05, "{kc:?}");
    let big = fit("y ~ s(x, k=20)", &data);
    let kc = kcheck(&big, 1);
    assert!(!kc[0].flagged, "{kc:?}");
    assert!(kc[0].index > 0.8);
    assert_eq!(kcheck(&big, 1), kcheck(&big, 1));
}

#[test]
fn summary_lists_every_non_intercept_term() {
    let (_, m) = growth_model("weight ~ s(day, k=8) + sz(day, sex) + ri(mother)");
    let s = summarize(&m);
    let labels: Vec<&str> = s.terms.iter().map(|t| t.label.as_str()).collect();
    assert_eq!(labels, ["s(day)", "sz(day,sex)", "ri(mother)"]);
    assert!(s.deviance_explained > 0.9);
    let text = s.to_string();
    assert!(text.contains("sz(day,sex)") && text.contains("AIC"));
}

#[test]
fn by_hand_values() {
    for v in adjust_by(&[0.01, 0.02, 0.03]) {
        assert!((v - 0.055).abs() < 1e-15);
    }
}

proptest! {
    #[test]
    fn by_dominates_bh(p in prop::collection::vec(0.0f64..=1.0, 1..40)) {
        let by = adjust_by(&p);
        let bh = adjust_bh(&p);
        for i in 0..p.len() {
            prop_assert!(by[i] >= bh[i]);
            prop_assert!(by[i] >= p[i] && by[i] <= 1.0);
        }
        // Order preserving.
        for i in 0..p.len() {
            for j in 0..p.len() {
                if p[i] < p[j] {
                    prop_assert!(by[i] <= by[j]);
                }
            }
        }
    }
}
