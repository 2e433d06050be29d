//! Penalized IRLS, smoothness selection and post-fit statistics.

mod criteria;
mod optimize;
mod pirls;
mod wood;

use std::cell::RefCell;
use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use criteria::Criterion;
pub use pirls::{InnerFit, Problem};
pub use wood::{fit_wood, fit_wood_lactation, wood_curve, wood_start, WoodFit};

use crate::data::Dataset;
use crate::design::{assemble_design, Design, Formula, ModelMatrices, TermKind};
use crate::family::{Family, FamilyError, FamilyKind};
use crate::linalg::{cholesky_with_ridge, serde_dmatrix};
use optimize::{fd_gradient, nelder_mead, newton_polish, pinned, Minimum};

#[derive(Debug, Error)]
pub enum FitError {
    #[error("no convergence after {iterations} iterations: {message}")]
    NonConvergence { iterations: usize, message: String },
    #[error("model is not identifiable: rank lost at term `{term}`")]
    Rank { term: String },
    #[error("GCV is degenerate: effective degrees of freedom {tau} reach n = {n}")]
    DegenerateGcv { tau: f64, n: usize },
    #[error("smoothness selection failed: {0}")]
    Optimization(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Family(#[from] FamilyError),
}

impl FitError {
    pub fn kind(&self) -> &'static str {
        match self {
            FitError::NonConvergence { .. } => "non_convergence",
            FitError::Rank { .. } => "rank",
            FitError::DegenerateGcv { .. } => "degenerate_gcv",
            FitError::Optimization(_) => "optimization",
            FitError::Numerical(_) => "numerical",
            FitError::Input(_) => "input",
            FitError::Family(e) => e.kind(),
        }
    }
}

/// Starting values of every log smoothing parameter for the optimizer
/// restarts.
pub const RESTART_STARTS: [f64; 3] = [-3.0, 0.0, 6.0];

/// Tweedie power grid searched before golden-section refinement.
pub const POWER_GRID: (f64, f64, f64) = (1.05, 1.95, 0.05);
pub const POWER_TOL: f64 = 0.005;

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub criterion: Criterion,
    /// Fixed smoothing parameters; skips smoothness selection when set.
    pub lambdas: Option<Vec<f64>>,
    /// Run optimizer restarts on the rayon pool.
    pub parallel: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            criterion: Criterion::Reml,
            lambdas: None,
            parallel: true,
        }
    }
}

impl FitOptions {
    pub fn criterion(criterion: Criterion) -> Self {
        FitOptions {
            criterion,
            ..Default::default()
        }
    }
}

/// A fitted GAM with everything needed for prediction and inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub design: Design,
    pub family: Family,
    pub criterion: Criterion,
    pub beta: Vec<f64>,
    pub lambdas: Vec<f64>,
    /// Pearson scale estimate Σ w (y − μ)² / V(μ) / (n − τ).
    pub phi: f64,
    /// Bayesian posterior covariance φ (XᵀWX + S_λ)⁻¹.
    #[serde(with = "serde_dmatrix")]
    pub vbeta: DMatrix<f64>,
    /// XᵀWX at the final weights.
    #[serde(with = "serde_dmatrix")]
    pub xtwx: DMatrix<f64>,
    /// Per-coefficient effective degrees of freedom, diag of the influence.
    pub edf: Vec<f64>,
    pub edf_total: f64,
    /// Per term, aligned with `design.terms`.
    pub edf_by_term: Vec<f64>,
    /// Maximized log-likelihood at β̂ (scale at its maximum-likelihood value).
    pub log_likelihood: f64,
    pub aic: f64,
    pub deviance: f64,
    pub null_deviance: f64,
    pub deviance_explained: f64,
    pub criterion_value: f64,
    pub rmse: f64,
    pub n: usize,
    pub converged: bool,
    pub iterations: usize,
    pub ridge_applied: bool,
    pub fitted: Vec<f64>,
    pub linear_predictor: Vec<f64>,
    pub y: Vec<f64>,
    pub weights: Vec<f64>,
    /// Training values of every numeric covariate, for ranges and residual
    /// checks.
    pub covariates: BTreeMap<String, Vec<f64>>,
    /// (p, profile log-likelihood) pairs when the Tweedie power was
    /// estimated.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub power_profile: Vec<(f64, f64)>,
}

impl FittedModel {
    pub fn power(&self) -> Option<f64> {
        self.family.power
    }

    pub fn residual_df(&self) -> f64 {
        self.n as f64 - self.edf_total
    }

    pub fn beta_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.beta)
    }
}

/// Fits `formula` to `data`.
pub fn fit_gam(formula: &Formula, data: &Dataset, family: Family, opts: &FitOptions) -> crate::Result<FittedModel> {
    let m = assemble_design(formula, data)?;
    Ok(fit_matrices(&m, data, family, opts)?)
}

/// Fits compiled model matrices, estimating the Tweedie power by profile
/// likelihood when it is not fixed.
pub fn fit_matrices(m: &ModelMatrices, data: &Dataset, family: Family, opts: &FitOptions) -> Result<FittedModel, FitError> {
    let y = data.response();
    let w = data.weights();
    let covariates = numeric_covariates(&m.design, data);
    if family.kind == FamilyKind::Tweedie && family.power.is_none() {
        return fit_tweedie_profile(m, y, &w, family, opts, covariates);
    }
    let problem = Problem::new(&m.design, &m.x, y, &w, family)?;
    let probe = vec![1.0; m.design.n_groups()];
    problem.check_identifiable(opts.lambdas.as_deref().unwrap_or(&probe))?;
    let (lambdas, fit, value) = select(&problem, opts)?;
    finalize(&problem, fit, lambdas, opts.criterion, value, covariates)
}

/// Smoothness selection by the requested criterion.
pub fn optimize_smoothness(m: &ModelMatrices, family: Family, data: &Dataset, criterion: Criterion) -> Result<FittedModel, FitError> {
    fit_matrices(m, data, family, &FitOptions::criterion(criterion))
}

/// PIRLS at fixed smoothing parameters.
pub fn pirls_fit(m: &ModelMatrices, family: Family, lambdas: &[f64], data: &Dataset) -> Result<InnerFit, FitError> {
    check_lambdas(&m.design, lambdas)?;
    let w = data.weights();
    let problem = Problem::new(&m.design, &m.x, data.response(), &w, family)?;
    problem.check_identifiable(lambdas)?;
    problem.fit(lambdas, None)
}

/// Negative Laplace-approximate REML at fixed smoothing parameters.
pub fn reml_criterion(m: &ModelMatrices, family: Family, lambdas: &[f64], data: &Dataset) -> Result<f64, FitError> {
    check_lambdas(&m.design, lambdas)?;
    let w = data.weights();
    let problem = Problem::new(&m.design, &m.x, data.response(), &w, family)?;
    let fit = problem.fit(lambdas, None)?;
    criteria::reml_value(&problem, &fit, lambdas)
}

/// GCV score n·D / (n − τ)² at fixed smoothing parameters.
pub fn gcv_criterion(m: &ModelMatrices, family: Family, lambdas: &[f64], data: &Dataset) -> Result<f64, FitError> {
    check_lambdas(&m.design, lambdas)?;
    let w = data.weights();
    let problem = Problem::new(&m.design, &m.x, data.response(), &w, family)?;
    let fit = problem.fit(lambdas, None)?;
    criteria::gcv_value(&problem, &fit)
}

/// Total EDF τ = tr((XᵀWX + S_λ)⁻¹ XᵀWX) at fixed smoothing parameters.
pub fn edf_at(m: &ModelMatrices, family: Family, lambdas: &[f64], data: &Dataset) -> Result<f64, FitError> {
    check_lambdas(&m.design, lambdas)?;
    let w = data.weights();
    let problem = Problem::new(&m.design, &m.x, data.response(), &w, family)?;
    let fit = problem.fit(lambdas, None)?;
    Ok(criteria::trace_influence(&fit))
}

/// log|S_λ|₊ over the structural range of the total penalty, and its rank.
pub fn penalty_log_determinant(design: &Design, lambdas: &[f64]) -> (f64, usize) {
    criteria::penalty_logdet(design, lambdas)
}

fn check_lambdas(design: &Design, lambdas: &[f64]) -> Result<(), FitError> {
    if lambdas.len() != design.n_groups() {
        return Err(FitError::Input(format!(
            "expected {} smoothing parameters, got {}",
            design.n_groups(),
            lambdas.len()
        )));
    }
    if lambdas.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
        return Err(FitError::Input("smoothing parameters must be finite and non-negative".into()));
    }
    Ok(())
}

fn numeric_covariates(design: &Design, data: &Dataset) -> BTreeMap<String, Vec<f64>> {
    let mut out = BTreeMap::new();
    for t in &design.terms {
        if matches!(
            t.spec.kind,
            TermKind::Linear | TermKind::Smooth | TermKind::BySmooth | TermKind::FsInteraction | TermKind::RandomSmooth
        ) {
            let c = t.spec.covariate.as_ref().unwrap();
            if let Ok(v) = data.numeric(c) {
                out.insert(c.clone(), v.to_vec());
            }
        }
    }
    out
}

/// Deterministic perturbation of the restart points so no coordinate
/// starts exactly on a symmetric ridge.
fn restart_point(base: f64, g: usize) -> Vec<f64> {
    (0..g).map(|j| base + 0.1 * (((j + 1) as f64 * 0.618_033_988_75).fract() - 0.5)).collect()
}

struct Evaluator<'a> {
    problem: &'a Problem<'a>,
    criterion: Criterion,
    warm: RefCell<Option<DVector<f64>>>,
}

impl<'a> Evaluator<'a> {
    fn fit_at(&self, rho: &[f64]) -> Result<(InnerFit, f64), FitError> {
        let lambdas: Vec<f64> = rho.iter().map(|r| r.exp()).collect();
        let start = self.warm.borrow().clone();
        let fit = match self.problem.fit(&lambdas, start.as_ref()) {
            Ok(f) => f,
            Err(_) if start.is_some() => self.problem.fit(&lambdas, None)?,
            Err(e) => return Err(e),
        };
        let v = criteria::criterion_value(self.problem, &fit, &lambdas, self.criterion)?;
        *self.warm.borrow_mut() = Some(fit.beta.clone());
        Ok((fit, v))
    }

    fn value(&self, rho: &[f64]) -> f64 {
        self.fit_at(rho).map(|(_, v)| v).unwrap_or(f64::INFINITY)
    }
}

fn select(problem: &Problem, opts: &FitOptions) -> Result<(Vec<f64>, InnerFit, f64), FitError> {
    let g = problem.design.n_groups();
    if let Some(l) = &opts.lambdas {
        check_lambdas(problem.design, l)?;
        let fit = problem.fit(l, None)?;
        let v = criteria::criterion_value(problem, &fit, l, opts.criterion)?;
        return Ok((l.clone(), fit, v));
    }
    if g == 0 {
        let fit = problem.fit(&[], None)?;
        let v = criteria::criterion_value(problem, &fit, &[], opts.criterion)?;
        return Ok((Vec::new(), fit, v));
    }
    let max_evals = 300 * (g + 1);
    let run = |base: &f64| -> Minimum {
        let ev = Evaluator {
            problem,
            criterion: opts.criterion,
            warm: RefCell::new(None),
        };
        nelder_mead(|r| ev.value(r), &restart_point(*base, g), 1.0, max_evals)
    };
    let results: Vec<Minimum> = if opts.parallel {
        RESTART_STARTS.par_iter().map(run).collect()
    } else {
        RESTART_STARTS.iter().map(run).collect()
    };
    let mut best: Option<&Minimum> = None;
    for r in &results {
        if !r.value.is_finite() {
            continue;
        }
        best = match best {
            None => Some(r),
            Some(b) => {
                let tol = 1e-9 * (1.0 + b.value.abs());
                let norm = |m: &Minimum| m.x.iter().map(|v| v * v).sum::<f64>();
                if r.value < b.value - tol || ((r.value - b.value).abs() <= tol && norm(r) < norm(b)) {
                    Some(r)
                } else {
                    Some(b)
                }
            }
        };
    }
    let Some(best) = best else {
        let trace: Vec<String> = results
            .iter()
            .zip(RESTART_STARTS)
            .map(|(r, s)| format!("start {s}: {} evaluations, value {}", r.evaluations, r.value))
            .collect();
        return Err(FitError::Optimization(format!(
            "every restart failed ({})",
            trace.join("; ")
        )));
    };
    let ev = Evaluator {
        problem,
        criterion: opts.criterion,
        warm: RefCell::new(None),
    };
    let mut f = |r: &[f64]| ev.value(r);
    let polished = newton_polish(&mut f, best, 20);
    let (fit, value) = ev.fit_at(&polished.x)?;
    let lambdas = polished.x.iter().map(|r| r.exp()).collect();
    Ok((lambdas, fit, value))
}

/// Finite-difference gradient of the fitted criterion with respect to
/// log λ (h = 1e-4). Components pinned at a bound of the search box with
/// the criterion still decreasing outward are reported as zero.
pub fn criterion_gradient(m: &ModelMatrices, data: &Dataset, model: &FittedModel) -> Result<Vec<f64>, FitError> {
    let w = data.weights();
    let problem = Problem::new(&m.design, &m.x, data.response(), &w, model.family)?;
    let ev = Evaluator {
        problem: &problem,
        criterion: model.criterion,
        warm: RefCell::new(Some(model.beta_vector())),
    };
    let rho: Vec<f64> = model.lambdas.iter().map(|l| l.ln()).collect();
    let mut f = |r: &[f64]| ev.value(r);
    let g = fd_gradient(&mut f, &rho, 1e-4);
    Ok(g.iter().zip(&rho).map(|(&gi, &r)| if pinned(r, gi) { 0.0 } else { gi }).collect())
}

/// Maximum-likelihood scale for fixed means, and the log-likelihood there.
pub(crate) fn profile_scale(family: &Family, y: &[f64], mu: &[f64], w: &[f64]) -> Result<(f64, f64), FitError> {
    let n = y.len() as f64;
    let loglik = |phi: f64| -> Result<f64, FitError> {
        let mut total = 0.0;
        for i in 0..y.len() {
            total += family.log_density(y[i], mu[i], phi / w[i])?;
        }
        Ok(total)
    };
    if family.kind == FamilyKind::Gaussian {
        let d = family.deviance(y, mu, w)?;
        let phi = (d / n).max(f64::MIN_POSITIVE);
        return Ok((phi, loglik(phi)?));
    }
    let pearson: f64 = (0..y.len()).map(|i| w[i] * (y[i] - mu[i]).powi(2) / family.variance(mu[i])).sum();
    let centre = (pearson / n).max(1e-12).ln();
    // Golden-section search on log φ.
    let (mut a, mut b) = (centre - 6.0, centre + 6.0);
    let gr = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - gr * (b - a);
    let mut d = a + gr * (b - a);
    let mut fc = loglik(c.exp())?;
    let mut fd = loglik(d.exp())?;
    while b - a > 1e-9 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - gr * (b - a);
            fc = loglik(c.exp())?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + gr * (b - a);
            fd = loglik(d.exp())?;
        }
    }
    let phi = (0.5 * (a + b)).exp();
    Ok((phi, loglik(phi)?))
}

fn finalize(
    problem: &Problem,
    fit: InnerFit,
    lambdas: Vec<f64>,
    criterion: Criterion,
    criterion_value: f64,
    covariates: BTreeMap<String, Vec<f64>>,
) -> Result<FittedModel, FitError> {
    let design = problem.design;
    let n = problem.n();
    let (edf, hinv) = criteria::edf_diag(&fit);
    let edf_total: f64 = edf.iter().sum();
    let edf_by_term = design.terms.iter().map(|t| edf[t.range()].iter().sum()).collect();
    let resid_df = (n as f64 - edf_total).max(f64::MIN_POSITIVE);
    let phi = criteria::pearson(problem, &fit) / resid_df;
    let mut ridge_applied = fit.ridged;
    let vbeta = {
        let mut v = &hinv * phi;
        v = (&v + v.transpose()) * 0.5;
        if cholesky_with_ridge(&v).map(|(_, r)| r).unwrap_or(true) {
            ridge_applied = true;
            let maxd = v.diagonal().amax();
            for i in 0..v.nrows() {
                v[(i, i)] += 1e-10 * maxd;
            }
        }
        v
    };
    let family = problem.family;
    let mu: Vec<f64> = fit.mu.iter().copied().collect();
    let (_, log_likelihood) = profile_scale(&family, problem.y, &mu, problem.w)?;
    let aic = -2.0 * log_likelihood + 2.0 * (edf_total + family.n_scale_params() as f64);
    let sw: f64 = problem.w.iter().sum();
    let ybar = problem.y.iter().zip(problem.w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let null_deviance = family.deviance(problem.y, &vec![ybar; n], problem.w)?;
    let deviance_explained = if null_deviance > 0.0 {
        1.0 - fit.deviance / null_deviance
    } else {
        0.0
    };
    let rmse = (problem.y.iter().zip(&mu).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64).sqrt();
    Ok(FittedModel {
        design: design.clone(),
        family,
        criterion,
        beta: fit.beta.iter().copied().collect(),
        lambdas,
        phi,
        vbeta,
        xtwx: fit.xtwx.clone(),
        edf,
        edf_total,
        edf_by_term,
        log_likelihood,
        aic,
        deviance: fit.deviance,
        null_deviance,
        deviance_explained,
        criterion_value,
        rmse,
        n,
        converged: fit.converged,
        iterations: fit.iterations,
        ridge_applied,
        fitted: mu,
        linear_predictor: fit.eta.iter().copied().collect(),
        y: problem.y.to_vec(),
        weights: problem.w.to_vec(),
        covariates,
        power_profile: Vec::new(),
    })
}

/// Estimates the Tweedie power: a full fit on the grid 1.05, 1.10, …, 1.95
/// followed by golden-section refinement of the profile log-likelihood
/// (scale maximized out at each p) around the best grid point.
fn fit_tweedie_profile(
    m: &ModelMatrices,
    y: &[f64],
    w: &[f64],
    family: Family,
    opts: &FitOptions,
    covariates: BTreeMap<String, Vec<f64>>,
) -> Result<FittedModel, FitError> {
    let probe = vec![1.0; m.design.n_groups()];
    let mut profile: Vec<(f64, f64)> = Vec::new();
    let fit_p = |p: f64| -> Result<(f64, Vec<f64>, InnerFit, f64), FitError> {
        let fam = family.with_power(p)?;
        let problem = Problem::new(&m.design, &m.x, y, w, fam)?;
        let (lambdas, fit, value) = select(&problem, opts)?;
        let mu: Vec<f64> = fit.mu.iter().copied().collect();
        let (_, ll) = profile_scale(&fam, y, &mu, w)?;
        Ok((ll, lambdas, fit, value))
    };
    {
        let fam = family.with_power(1.5)?;
        Problem::new(&m.design, &m.x, y, w, fam)?.check_identifiable(opts.lambdas.as_deref().unwrap_or(&probe))?;
    }
    let (lo, hi, step) = POWER_GRID;
    let n_grid = ((hi - lo) / step).round() as usize + 1;
    let grid: Vec<f64> = (0..n_grid).map(|i| ((lo + step * i as f64) * 1e6).round() / 1e6).collect();
    let grid_fits: Vec<Result<f64, FitError>> = if opts.parallel {
        grid.par_iter().map(|&p| fit_p(p).map(|r| r.0)).collect()
    } else {
        grid.iter().map(|&p| fit_p(p).map(|r| r.0)).collect()
    };
    for (p, r) in grid.iter().zip(grid_fits) {
        if let Ok(ll) = r {
            profile.push((*p, ll));
        }
    }
    let Some(&(p_best, _)) = profile.iter().max_by(|a, b| a.1.total_cmp(&b.1)) else {
        return Err(FitError::Optimization("no Tweedie power on the grid could be fitted".into()));
    };
    // Golden-section refinement on [p_best − step, p_best + step].
    let mut a = (p_best - step).max(1.0 + 1e-3);
    let mut b = (p_best + step).min(2.0 - 1e-3);
    let gr = 0.5 * (5f64.sqrt() - 1.0);
    let eval = |p: f64, profile: &mut Vec<(f64, f64)>| -> f64 {
        let ll = fit_p(p).map(|r| r.0).unwrap_or(f64::NEG_INFINITY);
        profile.push((p, ll));
        ll
    };
    let mut c = b - gr * (b - a);
    let mut d = a + gr * (b - a);
    let mut fc = eval(c, &mut profile);
    let mut fd = eval(d, &mut profile);
    while b - a > POWER_TOL {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - gr * (b - a);
            fc = eval(c, &mut profile);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + gr * (b - a);
            fd = eval(d, &mut profile);
        }
    }
    let &(p_hat, _) = profile.iter().max_by(|x, y| x.1.total_cmp(&y.1)).unwrap();
    let (_, lambdas, fit, value) = fit_p(p_hat)?;
    let fam = family.with_power(p_hat)?;
    let problem = Problem::new(&m.design, &m.x, y, w, fam)?;
    let mut model = finalize(&problem, fit, lambdas, opts.criterion, value, covariates)?;
    profile.sort_by(|x, y| x.0.total_cmp(&y.0));
    model.power_profile = profile;
    Ok(model)
}
