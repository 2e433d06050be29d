use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::pirls::{InnerFit, Problem};
use super::FitError;
use crate::design::Design;
use crate::family::FamilyKind;
use crate::linalg::{chol_logdet, sym_eigen_desc};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Reml,
    Gcv,
}

impl std::str::FromStr for Criterion {
    type Err = FitError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "reml" => Ok(Criterion::Reml),
            "gcv" => Ok(Criterion::Gcv),
            _ => Err(FitError::Input(format!("unknown criterion `{s}` (expected reml or gcv)"))),
        }
    }
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Criterion::Reml => "REML",
            Criterion::Gcv => "GCV",
        })
    }
}

/// Penalties acting on the same columns, whose weighted sum must be
/// log-determined jointly.
struct Cluster {
    members: Vec<usize>,
    rank: usize,
    repeats: usize,
}

fn clusters(design: &Design) -> Vec<Cluster> {
    let mut out: Vec<Cluster> = Vec::new();
    let mut keys: Vec<(usize, usize, usize)> = Vec::new();
    for (i, p) in design.penalties.iter().enumerate() {
        let key = (p.offset, p.block.nrows(), p.repeats);
        match keys.iter().position(|k| *k == key) {
            Some(c) => {
                out[c].members.push(i);
                out[c].rank = (out[c].rank + p.rank).min(p.block.nrows());
            }
            None => {
                keys.push(key);
                out.push(Cluster {
                    members: vec![i],
                    rank: p.rank,
                    repeats: p.repeats,
                });
            }
        }
    }
    out
}

/// log|S_λ|₊ and the rank of S_λ. Each cluster of penalties is
/// log-determined over its known structural rank, so the value is
/// continuous in λ.
pub(crate) fn penalty_logdet(design: &Design, lambdas: &[f64]) -> (f64, usize) {
    let mut total = 0.0;
    let mut rank = 0;
    for c in clusters(design) {
        let first = &design.penalties[c.members[0]];
        let b = first.block.nrows();
        let mut m = DMatrix::zeros(b, b);
        for &i in &c.members {
            let p = &design.penalties[i];
            m += &p.block * lambdas[p.group];
        }
        let (vals, _) = sym_eigen_desc(&m);
        let ld: f64 = vals[..c.rank].iter().map(|v| v.max(f64::MIN_POSITIVE).ln()).sum();
        total += ld * c.repeats as f64;
        rank += c.rank * c.repeats;
    }
    (total, rank)
}

/// Saturated log-likelihood Σ log f(y_i; y_i, φ / w_i).
pub(crate) fn saturated_loglik(problem: &Problem, phi: f64) -> Result<f64, FitError> {
    let mut total = 0.0;
    for (i, &y) in problem.y.iter().enumerate() {
        let phi_i = phi / problem.w[i];
        total += match problem.family.kind {
            FamilyKind::Gaussian => -0.5 * (2.0 * PI * phi_i).ln(),
            FamilyKind::Tweedie if y == 0.0 => 0.0,
            _ => problem.family.log_density(y, y, phi_i)?,
        };
    }
    Ok(total)
}

pub(crate) fn pearson(problem: &Problem, fit: &InnerFit) -> f64 {
    (0..problem.n())
        .map(|i| problem.w[i] * (problem.y[i] - fit.mu[i]).powi(2) / problem.family.variance(fit.mu[i]))
        .sum()
}

/// Scale used inside REML: the exact REML estimate for gaussian responses,
/// a Pearson-type plug-in otherwise.
pub(crate) fn reml_scale(problem: &Problem, fit: &InnerFit, null_dim: usize) -> f64 {
    let resid_df = (problem.n() as f64 - null_dim as f64).max(1.0);
    let num = match problem.family.kind {
        FamilyKind::Gaussian => fit.deviance + fit.penalty,
        _ => pearson(problem, fit) + fit.penalty,
    };
    (num / resid_df).max(f64::MIN_POSITIVE)
}

/// Negative Laplace-approximate restricted log-likelihood.
pub(crate) fn reml_value(problem: &Problem, fit: &InnerFit, lambdas: &[f64]) -> Result<f64, FitError> {
    let (ld_s, rank) = penalty_logdet(problem.design, lambdas);
    let p = problem.design.n_coef;
    let null_dim = p - rank.min(p);
    let phi = reml_scale(problem, fit, null_dim);
    let ld_h = chol_logdet(&fit.chol);
    let v = (fit.deviance + fit.penalty) / (2.0 * phi) - saturated_loglik(problem, phi)? - 0.5 * ld_s + 0.5 * ld_h
        - 0.5 * null_dim as f64 * (2.0 * PI * phi).ln();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(FitError::Numerical("non-finite REML criterion".into()))
    }
}

/// diag((XᵀWX + S_λ)⁻¹ XᵀWX) and the inverse itself.
pub(crate) fn edf_diag(fit: &InnerFit) -> (Vec<f64>, DMatrix<f64>) {
    let hinv = fit.chol.inverse();
    let f = &hinv * &fit.xtwx;
    ((0..f.nrows()).map(|i| f[(i, i)]).collect(), hinv)
}

pub(crate) fn trace_influence(fit: &InnerFit) -> f64 {
    // tr(H⁻¹ A) for symmetric H⁻¹ and A.
    let hinv = fit.chol.inverse();
    hinv.component_mul(&fit.xtwx).sum()
}

pub(crate) fn gcv_value(problem: &Problem, fit: &InnerFit) -> Result<f64, FitError> {
    let n = problem.n() as f64;
    let tau = trace_influence(fit);
    if tau >= n - 1e-8 {
        return Err(FitError::DegenerateGcv { tau, n: problem.n() });
    }
    Ok(n * fit.deviance / (n - tau).powi(2))
}

pub(crate) fn criterion_value(
    problem: &Problem,
    fit: &InnerFit,
    lambdas: &[f64],
    criterion: Criterion,
) -> Result<f64, FitError> {
    match criterion {
        Criterion::Reml => reml_value(problem, fit, lambdas),
        Criterion::Gcv => gcv_value(problem, fit),
    }
}
