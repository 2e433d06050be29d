use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{unique_sorted, BasisError, BasisKind, BasisMatrix, BasisSpec, PenaltyMatrix};
use crate::linalg::{householder_null_space, serde_dmatrix, sym_eigen_desc};

/// Radial function for a second-order thin plate spline in one dimension.
fn radial(r: f64) -> f64 {
    r.abs().powi(3) / 12.0
}

/// Low-rank thin plate regression spline for one covariate.
///
/// The first `k - 2` columns span the penalized (wiggly) space, the last
/// two are the unpenalized null space {1, x}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TprsBasis {
    /// Unique training covariate values.
    pub centers: Vec<f64>,
    /// Maps radial evaluations at the centres to wiggly basis columns
    /// (n_unique × (k − 2)).
    #[serde(with = "serde_dmatrix")]
    pub coef_map: DMatrix<f64>,
    /// Diagonal of the wiggly penalty block, descending.
    pub penalty_diag: Vec<f64>,
}

impl TprsBasis {
    pub fn dim(&self) -> usize {
        self.coef_map.ncols() + 2
    }

    pub fn support(&self) -> (f64, f64) {
        (self.centers[0], self.centers[self.centers.len() - 1])
    }

    pub fn row(&self, x: f64) -> Vec<f64> {
        let e = DVector::from_iterator(self.centers.len(), self.centers.iter().map(|c| radial(x - c)));
        let mut row: Vec<f64> = (self.coef_map.transpose() * e).iter().copied().collect();
        row.push(1.0);
        row.push(x);
        row
    }

    pub fn row_derivative(&self, x: f64, order: usize) -> Vec<f64> {
        if order == 0 {
            return self.row(x);
        }
        let d = |c: &f64| {
            let r = x - c;
            match order {
                1 => r.abs() * r / 4.0,
                2 => r.abs() / 2.0,
                3 => r.signum() / 2.0,
                _ => 0.0,
            }
        };
        let e = DVector::from_iterator(self.centers.len(), self.centers.iter().map(d));
        let mut row: Vec<f64> = (self.coef_map.transpose() * e).iter().copied().collect();
        row.push(0.0);
        row.push(if order == 1 { 1.0 } else { 0.0 });
        row
    }

    pub fn penalty(&self) -> PenaltyMatrix {
        let k = self.dim();
        let mut s = DMatrix::zeros(k, k);
        for (i, &d) in self.penalty_diag.iter().enumerate() {
            s[(i, i)] = d;
        }
        PenaltyMatrix::new(s, k - 2)
    }
}

/// Builds a rank-`k` thin plate regression spline.
///
/// The full radial matrix E (E_uv = |x_u − x_v|³/12 on the unique values)
/// is eigen-decomposed and the `k` eigenvectors with the largest-magnitude
/// eigenvalues are kept. The side condition Tᵀδ = 0 (T = [1, x]) is then
/// absorbed, leaving `k − 2` wiggly directions whose penalty is
/// re-diagonalized, plus the two null-space columns.
pub fn tprs_basis(x: &[f64], spec: &BasisSpec) -> Result<(BasisMatrix, PenaltyMatrix, TprsBasis), BasisError> {
    if spec.kind != BasisKind::Tprs {
        return Err(BasisError::InvalidSpec("expected a TPRS spec".into()));
    }
    spec.validate()?;
    if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
        return Err(BasisError::InvalidSpec(format!("non-finite covariate value {bad}")));
    }
    let centers = unique_sorted(x);
    if centers.len() < 2 {
        return Err(BasisError::Rank(format!(
            "covariate `{}` has fewer than two distinct values",
            spec.covariate
        )));
    }
    let k = spec.k;
    if centers.len() < k {
        return Err(BasisError::Dimension(format!(
            "{} unique values of `{}` cannot support a rank-{k} TPRS",
            centers.len(),
            spec.covariate
        )));
    }
    let n_u = centers.len();
    let e = DMatrix::from_fn(n_u, n_u, |i, j| radial(centers[i] - centers[j]));
    let (values, vectors) = sym_eigen_desc(&e);
    let mut order: Vec<usize> = (0..n_u).collect();
    order.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b)));
    let keep = &order[..k];
    let uk = DMatrix::from_fn(n_u, k, |i, j| vectors[(i, keep[j])]);
    let dk = DMatrix::from_fn(k, k, |i, j| if i == j { values[keep[i]] } else { 0.0 });

    // Side condition Tᵀ U_k δ = 0.
    let t = DMatrix::from_fn(n_u, 2, |i, j| if j == 0 { 1.0 } else { centers[i] });
    let c = uk.transpose() * t;
    let zk = householder_null_space(&c);
    let pw = zk.transpose() * &dk * &zk;
    let (lam, v) = sym_eigen_desc(&pw);
    let coef_map = uk * zk * v;
    let penalty_diag: Vec<f64> = lam.iter().map(|l| l.max(0.0)).collect();

    let tb = TprsBasis {
        centers,
        coef_map,
        penalty_diag,
    };
    let mut values = DMatrix::zeros(x.len(), k);
    for (i, &xi) in x.iter().enumerate() {
        for (j, v) in tb.row(xi).into_iter().enumerate() {
            values[(i, j)] = v;
        }
    }
    let penalty = tb.penalty();
    Ok((
        BasisMatrix {
            values,
            spec: spec.clone(),
        },
        penalty,
        tb,
    ))
}
