//! Spline bases, wiggliness penalties and identifiability constraints.
//!
//! Three basis kinds are supported: clamped B-splines with quantile knots
//! and an exact integrated-squared-second-derivative penalty, low-rank thin
//! plate regression splines (TPRS) for a single covariate, and level
//! indicators for iid random intercepts.

mod bspline;
mod constraint;
mod tprs;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bspline::{bspline_basis, bspline_penalty, bspline_row, bspline_row_derivative, greville, quantile_knots};
pub use constraint::{absorb_constraint, ConstraintTransform};
pub use tprs::{tprs_basis, TprsBasis};

use crate::linalg::{self, serde_dmatrix};

#[derive(Debug, Error)]
pub enum BasisError {
    #[error("basis dimension error: {0}")]
    Dimension(String),
    #[error("rank error: {0}")]
    Rank(String),
    #[error("unsupported penalty: {0}")]
    UnsupportedPenalty(String),
    #[error("invalid basis specification: {0}")]
    InvalidSpec(String),
    #[error("x = {x} lies outside the basis support [{lo}, {hi}]")]
    Extrapolation { x: f64, lo: f64, hi: f64 },
}

impl BasisError {
    pub fn kind(&self) -> &'static str {
        match self {
            BasisError::Dimension(_) => "dimension",
            BasisError::Rank(_) => "rank",
            BasisError::UnsupportedPenalty(_) => "unsupported_penalty",
            BasisError::InvalidSpec(_) => "invalid_spec",
            BasisError::Extrapolation { .. } => "extrapolation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    Bspline,
    Tprs,
    RandomIntercept,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub kind: BasisKind,
    /// Basis dimension before any constraint is absorbed.
    pub k: usize,
    /// Spline degree (B-splines only).
    pub degree: usize,
    pub covariate: String,
    /// Full clamped knot vector of length `k + degree + 1`, if given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knots: Option<Vec<f64>>,
}

impl BasisSpec {
    pub fn bspline(covariate: impl Into<String>, k: usize) -> Self {
        BasisSpec {
            kind: BasisKind::Bspline,
            k,
            degree: 3,
            covariate: covariate.into(),
            knots: None,
        }
    }

    pub fn tprs(covariate: impl Into<String>, k: usize) -> Self {
        BasisSpec {
            kind: BasisKind::Tprs,
            k,
            degree: 0,
            covariate: covariate.into(),
            knots: None,
        }
    }

    pub fn random_intercept(factor: impl Into<String>, n_levels: usize) -> Self {
        BasisSpec {
            kind: BasisKind::RandomIntercept,
            k: n_levels,
            degree: 0,
            covariate: factor.into(),
            knots: None,
        }
    }

    pub fn validate(&self) -> Result<(), BasisError> {
        match self.kind {
            BasisKind::Bspline => {
                if self.degree == 0 {
                    return Err(BasisError::InvalidSpec("B-spline degree must be >= 1".into()));
                }
                if self.k < self.degree + 1 {
                    return Err(BasisError::Dimension(format!(
                        "B-spline needs k >= degree + 1 = {}, got k = {}",
                        self.degree + 1,
                        self.k
                    )));
                }
                if let Some(t) = &self.knots {
                    if t.len() != self.k + self.degree + 1 {
                        return Err(BasisError::InvalidSpec(format!(
                            "knot vector needs {} entries, got {}",
                            self.k + self.degree + 1,
                            t.len()
                        )));
                    }
                    if t.windows(2).any(|w| !(w[1] >= w[0])) {
                        return Err(BasisError::InvalidSpec("knots must be non-decreasing".into()));
                    }
                }
            }
            BasisKind::Tprs => {
                if self.k < 3 {
                    return Err(BasisError::Dimension(format!(
                        "TPRS needs k >= 3, got k = {}",
                        self.k
                    )));
                }
            }
            BasisKind::RandomIntercept => {
                if self.k == 0 {
                    return Err(BasisError::Dimension("random intercept with no levels".into()));
                }
            }
        }
        Ok(())
    }
}

/// Evaluated basis functions, one row per observation.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisMatrix {
    pub values: DMatrix<f64>,
    pub spec: BasisSpec,
}

/// A symmetric positive semi-definite penalty with known rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyMatrix {
    #[serde(with = "serde_dmatrix")]
    pub values: DMatrix<f64>,
    pub rank: usize,
}

impl PenaltyMatrix {
    pub fn new(values: DMatrix<f64>, rank: usize) -> Self {
        PenaltyMatrix { values, rank }
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn null_space_dim(&self) -> usize {
        self.dim() - self.rank
    }

    /// Smallest and largest eigenvalue.
    pub fn eigen_range(&self) -> (f64, f64) {
        let (v, _) = linalg::sym_eigen_desc(&self.values);
        (*v.last().unwrap_or(&0.0), *v.first().unwrap_or(&0.0))
    }
}

/// Stored artifacts needed to re-evaluate an unconstrained basis at new
/// covariate values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SmoothBasis {
    Bspline {
        knots: Vec<f64>,
        degree: usize,
    },
    Tprs(TprsBasis),
}

impl SmoothBasis {
    pub fn dim(&self) -> usize {
        match self {
            SmoothBasis::Bspline { knots, degree } => knots.len() - degree - 1,
            SmoothBasis::Tprs(t) => t.dim(),
        }
    }

    pub fn support(&self) -> (f64, f64) {
        match self {
            SmoothBasis::Bspline { knots, .. } => (knots[0], knots[knots.len() - 1]),
            SmoothBasis::Tprs(t) => t.support(),
        }
    }

    /// Unconstrained basis rows at `x`. Points outside the training support
    /// are an error unless `clamp` is set, in which case they are moved to
    /// the nearest boundary.
    pub fn evaluate(&self, x: &[f64], clamp: bool) -> Result<DMatrix<f64>, BasisError> {
        let (lo, hi) = self.support();
        let slack = 1e-9 * (hi - lo).abs().max(1.0);
        let mut xs = Vec::with_capacity(x.len());
        for &xi in x {
            if !xi.is_finite() {
                return Err(BasisError::InvalidSpec(format!("non-finite covariate value {xi}")));
            }
            if xi < lo - slack || xi > hi + slack {
                if !clamp {
                    return Err(BasisError::Extrapolation { x: xi, lo, hi });
                }
            }
            xs.push(xi.clamp(lo, hi));
        }
        let k = self.dim();
        let mut out = DMatrix::zeros(xs.len(), k);
        match self {
            SmoothBasis::Bspline { knots, degree } => {
                for (i, &xi) in xs.iter().enumerate() {
                    let row = bspline_row(knots, *degree, xi);
                    for j in 0..k {
                        out[(i, j)] = row[j];
                    }
                }
            }
            SmoothBasis::Tprs(t) => {
                for (i, &xi) in xs.iter().enumerate() {
                    let row = t.row(xi);
                    for j in 0..k {
                        out[(i, j)] = row[j];
                    }
                }
            }
        }
        Ok(out)
    }

    /// Derivative of the unconstrained basis with respect to the covariate.
    pub fn evaluate_derivative(&self, x: &[f64], order: usize) -> Result<DMatrix<f64>, BasisError> {
        let (lo, hi) = self.support();
        let k = self.dim();
        let mut out = DMatrix::zeros(x.len(), k);
        for (i, &xi) in x.iter().enumerate() {
            if xi < lo || xi > hi {
                return Err(BasisError::Extrapolation { x: xi, lo, hi });
            }
            let row = match self {
                SmoothBasis::Bspline { knots, degree } => bspline_row_derivative(knots, *degree, xi, order),
                SmoothBasis::Tprs(t) => t.row_derivative(xi, order),
            };
            for j in 0..k {
                out[(i, j)] = row[j];
            }
        }
        Ok(out)
    }
}

/// Level-indicator "basis" for an iid random intercept, with an identity
/// penalty.
pub fn random_intercept_basis(codes: &[usize], n_levels: usize, spec: &BasisSpec) -> (BasisMatrix, PenaltyMatrix) {
    let mut values = DMatrix::zeros(codes.len(), n_levels);
    for (i, &c) in codes.iter().enumerate() {
        values[(i, c)] = 1.0;
    }
    (
        BasisMatrix {
            values,
            spec: spec.clone(),
        },
        PenaltyMatrix::new(DMatrix::identity(n_levels, n_levels), n_levels),
    )
}

/// Sorted unique values.
pub(crate) fn unique_sorted(x: &[f64]) -> Vec<f64> {
    let mut u: Vec<f64> = x.to_vec();
    u.sort_by(f64::total_cmp);
    u.dedup();
    u
}
