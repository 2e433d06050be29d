//! Predictions, slopes, contrasts and per-term diagnostics for a fitted
//! model. Everything here is read-only on [`FittedModel`].

mod summary;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, Normal};
use thiserror::Error;

pub use summary::{summarize, Summary, TermSummary};

use crate::design::{Grid, GridColumn, SpecError, TermKind};
use crate::fit::FittedModel;
use crate::linalg::{cholesky_with_ridge, sym_eigen_desc};

/// Footnote for predictions that drop random-effect terms.
pub const EXCLUSION_NOTE: &str = "Predictions with terms excluded are conditional on those terms being zero; \
under a non-identity link they should not be interpreted as population level effects.";

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("unknown term `{0}`")]
    UnknownTerm(String),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("invalid request: {0}")]
    Request(String),
    #[error("nothing to compare: {0}")]
    NothingToCompare(String),
}

impl InferenceError {
    pub fn kind(&self) -> &'static str {
        match self {
            InferenceError::UnknownTerm(_) => "unknown_term",
            InferenceError::Spec(e) => e.kind(),
            InferenceError::Request(_) => "request",
            InferenceError::NothingToCompare(_) => "nothing_to_compare",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Link,
    Response,
}

impl std::str::FromStr for Scale {
    type Err = InferenceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "link" => Ok(Scale::Link),
            "response" => Ok(Scale::Response),
            _ => Err(InferenceError::Request(format!("unknown scale `{s}` (expected link or response)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRequest {
    pub grid: Grid,
    pub exclude: Vec<String>,
    pub scale: Scale,
    pub level: f64,
}

impl PredictionRequest {
    pub fn new(grid: Grid) -> Self {
        PredictionRequest {
            grid,
            exclude: Vec::new(),
            scale: Scale::Response,
            level: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub fit: Vec<f64>,
    pub se: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Term indices for a list of labels.
pub fn resolve_terms(model: &FittedModel, labels: &[String]) -> Result<Vec<usize>, InferenceError> {
    labels
        .iter()
        .map(|l| model.design.term_index(l).ok_or_else(|| InferenceError::UnknownTerm(l.clone())))
        .collect()
}

/// Two-sided standard normal quantile for a credible level in (0, 1).
pub fn z_quantile(level: f64) -> Result<f64, InferenceError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(InferenceError::Request(format!("credible level must lie in (0, 1), got {level}")));
    }
    Ok(Normal::new(0.0, 1.0).unwrap().inverse_cdf(0.5 + level / 2.0))
}

/// sqrt(diag(X V Xᵀ)).
fn row_se(x: &DMatrix<f64>, v: &DMatrix<f64>) -> Vec<f64> {
    let xv = x * v;
    (0..x.nrows()).map(|i| xv.row(i).dot(&x.row(i)).max(0.0).sqrt()).collect()
}

/// Predictions with pointwise credible intervals. Excluded terms have
/// their columns zeroed.
pub fn predict(model: &FittedModel, req: &PredictionRequest) -> Result<Prediction, InferenceError> {
    let exclude = resolve_terms(model, &req.exclude)?;
    let z = z_quantile(req.level)?;
    let x = model.design.predict_matrix(&req.grid, &exclude, false)?;
    let eta = &x * model.beta_vector();
    let se = row_se(&x, &model.vbeta);
    let n = eta.len();
    let mut out = Prediction {
        fit: Vec::with_capacity(n),
        se: Vec::with_capacity(n),
        lower: Vec::with_capacity(n),
        upper: Vec::with_capacity(n),
    };
    let fam = &model.family;
    for i in 0..n {
        let (lo, hi) = (eta[i] - z * se[i], eta[i] + z * se[i]);
        match req.scale {
            Scale::Link => {
                out.fit.push(eta[i]);
                out.se.push(se[i]);
                out.lower.push(lo);
                out.upper.push(hi);
            }
            Scale::Response => {
                out.fit.push(fam.link_invert(eta[i]));
                out.se.push(fam.mu_eta(eta[i]).abs() * se[i]);
                out.lower.push(fam.link_invert(lo));
                out.upper.push(fam.link_invert(hi));
            }
        }
    }
    Ok(out)
}

/// Per-row term contributions X_t β_t on the link scale.
pub fn term_contributions(model: &FittedModel, grid: &Grid, term: &str) -> Result<Vec<f64>, InferenceError> {
    let t = model.design.term_index(term).ok_or_else(|| InferenceError::UnknownTerm(term.to_string()))?;
    let others: Vec<usize> = (0..model.design.terms.len()).filter(|&i| i != t).collect();
    let x = model.design.predict_matrix(grid, &others, false)?;
    Ok((x * model.beta_vector()).iter().copied().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slope {
    pub slope: f64,
    pub se: f64,
}

/// Response-scale value and its gradient with respect to β, per grid row.
struct Quantity {
    value: Vec<f64>,
    grad: DMatrix<f64>,
}

fn mean_quantity(model: &FittedModel, grid: &Grid, exclude: &[usize]) -> Result<Quantity, InferenceError> {
    let x = model.design.predict_matrix(grid, exclude, false)?;
    let eta = &x * model.beta_vector();
    let fam = &model.family;
    let mut grad = x;
    for i in 0..grad.nrows() {
        let d = fam.mu_eta(eta[i]);
        grad.row_mut(i).scale_mut(d);
    }
    Ok(Quantity {
        value: eta.iter().map(|&e| fam.link_invert(e)).collect(),
        grad,
    })
}

/// Training range of a covariate, from the first retained smooth that
/// uses it or else from the stored training values.
fn covariate_range(model: &FittedModel, wrt: &str, exclude: &[usize]) -> Result<(f64, f64), InferenceError> {
    for (i, t) in model.design.terms.iter().enumerate() {
        if exclude.contains(&i) || t.spec.covariate.as_deref() != Some(wrt) {
            continue;
        }
        if let Some(sb) = &t.smooth {
            return Ok(sb.support());
        }
    }
    if let Some(v) = model.covariates.get(wrt) {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        return Ok((lo, hi));
    }
    Err(InferenceError::Request(format!("`{wrt}` is not a numeric covariate of the model")))
}

fn slope_quantity(model: &FittedModel, grid: &Grid, wrt: &str, exclude: &[usize]) -> Result<Quantity, InferenceError> {
    let (lo, hi) = covariate_range(model, wrt, exclude)?;
    let h = (hi - lo) / 1000.0;
    let x = grid.numeric(wrt)?.to_vec();
    let slack = 1e-9 * (hi - lo).abs().max(1.0);
    let mut up = Vec::with_capacity(x.len());
    let mut dn = Vec::with_capacity(x.len());
    for &xi in &x {
        if xi < lo - slack || xi > hi + slack {
            return Err(SpecError::Basis {
                term: wrt.to_string(),
                source: crate::basis::BasisError::Extrapolation { x: xi, lo, hi },
            }
            .into());
        }
        // Keep the 2h-wide difference inside the support near its ends.
        let c = xi.clamp(lo + h, hi - h);
        up.push(c + h);
        dn.push(c - h);
    }
    let mut g_up = grid.clone();
    g_up.set(wrt, GridColumn::Numeric(up))?;
    let mut g_dn = grid.clone();
    g_dn.set(wrt, GridColumn::Numeric(dn))?;
    let qu = mean_quantity(model, &g_up, exclude)?;
    let qd = mean_quantity(model, &g_dn, exclude)?;
    Ok(Quantity {
        value: qu.value.iter().zip(&qd.value).map(|(a, b)| (a - b) / (2.0 * h)).collect(),
        grad: (qu.grad - qd.grad) / (2.0 * h),
    })
}

/// Response-scale slope with respect to `wrt` at each grid row, by central
/// finite differences with step (covariate range)/1000, and its
/// delta-method standard error.
pub fn slope(model: &FittedModel, at: &Grid, wrt: &str, exclude: &[String]) -> Result<Vec<Slope>, InferenceError> {
    let exclude = resolve_terms(model, exclude)?;
    let q = slope_quantity(model, at, wrt, &exclude)?;
    let se = row_se(&q.grad, &model.vbeta);
    Ok(q.value.iter().zip(se).map(|(&s, se)| Slope { slope: s, se }).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastResult {
    /// Value of the `within` factor, if any.
    pub group: Option<String>,
    pub level_a: String,
    pub level_b: String,
    /// "B - A".
    pub hypothesis: String,
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub p_raw: f64,
    pub p_adjusted: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ContrastQuantity {
    Mean,
    Slope { wrt: String },
}

/// Wald contrast q_b − q_a of two response-scale quantities with gradients
/// `ga`, `gb`.
fn wald(model: &FittedModel, qa: f64, ga: DVector<f64>, qb: f64, gb: DVector<f64>) -> (f64, f64, f64, f64) {
    let estimate = qb - qa;
    let d = gb - ga;
    let se = d.dot(&(&model.vbeta * &d)).max(0.0).sqrt();
    let z = if se > 0.0 { estimate / se } else { 0.0 };
    let p = if se > 0.0 {
        2.0 * Normal::new(0.0, 1.0).unwrap().cdf(-z.abs())
    } else {
        1.0
    };
    (estimate, se, z, p.min(1.0))
}

/// Level labels of a factor as stored by any term that uses it.
pub fn factor_levels(model: &FittedModel, factor: &str) -> Option<Vec<String>> {
    for t in &model.design.terms {
        let names: Vec<&String> = if t.spec.kind == TermKind::Factor {
            t.spec.covariate.iter().collect()
        } else {
            t.spec.factors.iter().collect()
        };
        if let Some(i) = names.iter().position(|n| n.as_str() == factor) {
            return Some(t.levels[i].clone());
        }
    }
    None
}

/// All pairwise contrasts among the levels of `factor`, separately for each
/// level of `within`, at the fixed covariate values `at`. Factors used only
/// by excluded terms get a placeholder level. Benjamini–Yekutieli
/// adjustment is applied over the whole family of returned comparisons.
pub fn pairwise_contrasts(
    model: &FittedModel,
    at: &[(String, f64)],
    factor: &str,
    within: Option<&str>,
    quantity: &ContrastQuantity,
    exclude: &[String],
) -> Result<Vec<ContrastResult>, InferenceError> {
    let ex = resolve_terms(model, exclude)?;
    let levels = factor_levels(model, factor)
        .ok_or_else(|| InferenceError::Request(format!("`{factor}` is not a factor of the model")))?;
    if levels.len() < 2 {
        return Err(InferenceError::NothingToCompare(format!("`{factor}` has a single level")));
    }
    let groups: Vec<Option<String>> = match within {
        Some(w) => factor_levels(model, w)
            .ok_or_else(|| InferenceError::Request(format!("`{w}` is not a factor of the model")))?
            .into_iter()
            .map(Some)
            .collect(),
        None => vec![None],
    };
    // One grid row per (group, level) cell.
    let mut cols: Vec<(String, GridColumn)> = Vec::new();
    let n_cells = groups.len() * levels.len();
    for (name, v) in at {
        cols.push((name.clone(), GridColumn::Numeric(vec![*v; n_cells])));
    }
    let mut f_col = Vec::with_capacity(n_cells);
    let mut w_col = Vec::with_capacity(n_cells);
    for g in &groups {
        for l in &levels {
            f_col.push(l.clone());
            if let Some(g) = g {
                w_col.push(g.clone());
            }
        }
    }
    cols.push((factor.to_string(), GridColumn::Labels(f_col)));
    if let Some(w) = within {
        cols.push((w.to_string(), GridColumn::Labels(w_col)));
    }
    let given: Vec<String> = cols.iter().map(|(n, _)| n.clone()).collect();
    // Placeholders for factors that only excluded terms read.
    for (ti, t) in model.design.terms.iter().enumerate() {
        if !ex.contains(&ti) {
            continue;
        }
        for (fi, f) in t.spec.factors.iter().enumerate() {
            if !given.contains(f) && !cols.iter().any(|(n, _)| n == f) {
                cols.push((f.clone(), GridColumn::Labels(vec![t.levels[fi][0].clone(); n_cells])));
            }
        }
    }
    for needed in model.design.required_columns(&ex) {
        if !cols.iter().any(|(n, _)| *n == needed) {
            return Err(InferenceError::Request(format!(
                "no value given for `{needed}`, which a retained term needs"
            )));
        }
    }
    let grid = Grid::new(cols)?;
    let q = match quantity {
        ContrastQuantity::Mean => mean_quantity(model, &grid, &ex)?,
        ContrastQuantity::Slope { wrt } => slope_quantity(model, &grid, wrt, &ex)?,
    };
    let z975 = z_quantile(0.95)?;
    let mut out = Vec::new();
    for (gi, g) in groups.iter().enumerate() {
        for i in 0..levels.len() {
            for j in i + 1..levels.len() {
                let a = gi * levels.len() + i;
                let b = gi * levels.len() + j;
                let (estimate, se, z, p) = wald(
                    model,
                    q.value[a],
                    q.grad.row(a).transpose(),
                    q.value[b],
                    q.grad.row(b).transpose(),
                );
                out.push(ContrastResult {
                    group: g.clone(),
                    level_a: levels[i].clone(),
                    level_b: levels[j].clone(),
                    hypothesis: format!("{} - {}", levels[j], levels[i]),
                    estimate,
                    se,
                    z,
                    p_raw: p,
                    p_adjusted: p,
                    ci_lower: estimate - z975 * se,
                    ci_upper: estimate + z975 * se,
                });
            }
        }
    }
    let raw: Vec<f64> = out.iter().map(|c| c.p_raw).collect();
    for (c, p) in out.iter_mut().zip(adjust_by(&raw)) {
        c.p_adjusted = p;
    }
    Ok(out)
}

/// Contrast between two single-row grids, q_b − q_a.
pub fn contrast(
    model: &FittedModel,
    a: &Grid,
    b: &Grid,
    quantity: &ContrastQuantity,
    exclude: &[String],
) -> Result<ContrastResult, InferenceError> {
    let ex = resolve_terms(model, exclude)?;
    let get = |g: &Grid| match quantity {
        ContrastQuantity::Mean => mean_quantity(model, g, &ex),
        ContrastQuantity::Slope { wrt } => slope_quantity(model, g, wrt, &ex),
    };
    let (qa, qb) = (get(a)?, get(b)?);
    if qa.value.len() != 1 || qb.value.len() != 1 {
        return Err(InferenceError::Request("contrast grids must have exactly one row".into()));
    }
    let (estimate, se, z, p) = wald(model, qa.value[0], qa.grad.row(0).transpose(), qb.value[0], qb.grad.row(0).transpose());
    let z975 = z_quantile(0.95)?;
    Ok(ContrastResult {
        group: None,
        level_a: "a".into(),
        level_b: "b".into(),
        hypothesis: "b - a".into(),
        estimate,
        se,
        z,
        p_raw: p,
        p_adjusted: p,
        ci_lower: estimate - z975 * se,
        ci_upper: estimate + z975 * se,
    })
}

fn step_up_adjust(p: &[f64], factor: f64) -> Vec<f64> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
    let mut adjusted = vec![0.0; m];
    let mut running: f64 = 1.0;
    for rank in (1..=m).rev() {
        let i = order[rank - 1];
        let q = (p[i] * m as f64 * factor / rank as f64).min(1.0);
        running = running.min(q);
        adjusted[i] = running;
    }
    adjusted
}

/// Benjamini–Yekutieli adjusted p-values.
pub fn adjust_by(p: &[f64]) -> Vec<f64> {
    let c: f64 = (1..=p.len()).map(|j| 1.0 / j as f64).sum();
    step_up_adjust(p, c)
}

/// Benjamini–Hochberg adjusted p-values.
pub fn adjust_bh(p: &[f64]) -> Vec<f64> {
    step_up_adjust(p, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermTest {
    pub label: String,
    pub edf: f64,
    /// Rank of the pseudo-inverse used.
    pub rank: usize,
    /// Wald statistic divided by `rank`.
    pub statistic: f64,
    pub df1: f64,
    pub df2: f64,
    pub p: f64,
}

/// Wald-type test that a term's contribution is zero, with smoothing
/// parameters treated as fixed and known.
///
/// Penalized terms are tested on the scale of their fitted values: with
/// RᵀR = X_tᵀWX_t, the statistic is (Rβ_t)ᵀ (R V_t Rᵀ)⁻ʳ (Rβ_t) using the
/// r leading eigen-directions, r = max(1, ceil(EDF − 0.001)) capped at the
/// block size, and T/r is referred to F(r, n − τ). Parametric terms use the
/// full block.
pub fn term_test(model: &FittedModel, term: &str) -> Result<TermTest, InferenceError> {
    let ti = model.design.term_index(term).ok_or_else(|| InferenceError::UnknownTerm(term.to_string()))?;
    let t = &model.design.terms[ti];
    let r0 = t.range();
    let b = r0.len();
    if b == 0 {
        return Err(InferenceError::Request(format!("term `{term}` has no coefficients")));
    }
    let mut beta = DVector::from_column_slice(&model.beta[r0.clone()]);
    let mut v = model.vbeta.view((r0.start, r0.start), (b, b)).clone_owned();
    let edf = model.edf_by_term[ti];
    let rank = if t.spec.is_penalized() {
        let a = model.xtwx.view((r0.start, r0.start), (b, b)).clone_owned();
        if let Some((ch, _)) = cholesky_with_ridge(&a) {
            let r = ch.l().transpose();
            beta = &r * beta;
            v = &r * v * r.transpose();
        }
        ((edf - 1e-3).ceil().max(1.0) as usize).min(b)
    } else {
        b
    };
    let (vals, vecs) = sym_eigen_desc(&v);
    let mut stat = 0.0;
    let tol = vals[0].max(0.0) * 1e-12;
    let mut used = 0;
    for i in 0..rank {
        if vals[i] > tol {
            let c = vecs.column(i).dot(&beta);
            stat += c * c / vals[i];
            used += 1;
        }
    }
    let used = used.max(1);
    let f = stat / used as f64;
    let df2 = model.residual_df().max(1.0);
    let p = if f > 0.0 {
        1.0 - FisherSnedecor::new(used as f64, df2).unwrap().cdf(f)
    } else {
        1.0
    };
    Ok(TermTest {
        label: t.spec.label.clone(),
        edf,
        rank: used,
        statistic: f,
        df1: used as f64,
        df2,
        p: p.clamp(0.0, 1.0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KCheck {
    pub label: String,
    /// Coefficients of the term after constraints.
    pub k: usize,
    pub edf: f64,
    /// Lag-1 residual difference ratio; well below 1 means residual pattern.
    pub index: f64,
    pub p: f64,
    pub flagged: bool,
}

/// Deviance residuals sign(y − μ)·sqrt(w·d(y, μ)).
pub fn deviance_residuals(model: &FittedModel) -> Vec<f64> {
    (0..model.n)
        .map(|i| {
            let d = model
                .family
                .unit_deviance(model.y[i], model.fitted[i])
                .unwrap_or(0.0);
            (model.y[i] - model.fitted[i]).signum() * (model.weights[i] * d).sqrt()
        })
        .collect()
}

fn lag_ratio(r: &[f64], order: &[usize]) -> f64 {
    let ss: f64 = r.iter().map(|v| v * v).sum();
    if ss == 0.0 {
        return 1.0;
    }
    let diff: f64 = order.windows(2).map(|w| (r[w[1]] - r[w[0]]).powi(2)).sum();
    diff / (2.0 * ss)
}

/// Basis-dimension check for each smooth: residuals ordered by the smooth's
/// covariate are tested for serial pattern against 1000 random orderings.
pub fn kcheck(model: &FittedModel, seed: u64) -> Vec<KCheck> {
    let r = deviance_residuals(model);
    let mut out = Vec::new();
    for (ti, t) in model.design.terms.iter().enumerate() {
        if !t.spec.is_penalized() || t.smooth.is_none() {
            continue;
        }
        let Some(x) = t.spec.covariate.as_ref().and_then(|c| model.covariates.get(c)) else {
            continue;
        };
        let mut order: Vec<usize> = (0..x.len()).collect();
        order.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));
        let v = lag_ratio(&r, &order);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..r.len()).collect();
        let mut below = 0usize;
        const N_PERM: usize = 1000;
        for _ in 0..N_PERM {
            perm.shuffle(&mut rng);
            if lag_ratio(&r, &perm) <= v {
                below += 1;
            }
        }
        let p = (below + 1) as f64 / (N_PERM + 1) as f64;
        let edf = model.edf_by_term[ti];
        let k = t.width();
        out.push(KCheck {
            label: t.spec.label.clone(),
            k,
            edf,
            index: v,
            p,
            flagged: edf > 0.9 * k as f64 && p < 0.05,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn by_single_p_is_unchanged() {
        assert_eq!(adjust_by(&[0.03]), vec![0.03]);
    }

    #[test]
    fn by_hand_example() {
        // c(3) = 11/6; raw·3·c/rank = 0.055 for each, then cumulative min.
        let adj = adjust_by(&[0.01, 0.02, 0.03]);
        for a in adj {
            assert!((a - 0.055).abs() < 1e-15, "{a}");
        }
    }

    #[test]
    fn by_all_ones() {
        assert_eq!(adjust_by(&[1.0; 5]), vec![1.0; 5]);
    }

    #[test]
    fn by_twelve_large_p_go_to_one() {
        let p: Vec<f64> = (0..12).map(|i| 0.08 + 0.07 * i as f64).collect();
        assert!(adjust_by(&p).iter().all(|&q| q == 1.0));
    }

    #[test]
    fn by_dominates_bh_and_preserves_order() {
        let p = [0.2, 0.001, 0.04, 0.5, 0.013, 0.04];
        let by = adjust_by(&p);
        let bh = adjust_bh(&p);
        for i in 0..p.len() {
            assert!(by[i] >= bh[i] && by[i] >= p[i] && by[i] <= 1.0);
        }
        assert_eq!(by[2], by[5]);
    }
}
