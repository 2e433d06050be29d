use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{BasisError, BasisMatrix, PenaltyMatrix};
use crate::linalg::{householder_null_space, serde_dmatrix};

/// Maps constrained coefficients back to the unconstrained basis:
/// β = Z γ. Columns of `z` are orthonormal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintTransform {
    #[serde(with = "serde_dmatrix")]
    pub z: DMatrix<f64>,
    /// Set when the basis was already centred and no column was removed.
    #[serde(default)]
    pub degenerate: bool,
}

impl ConstraintTransform {
    pub fn identity(k: usize) -> Self {
        ConstraintTransform {
            z: DMatrix::identity(k, k),
            degenerate: true,
        }
    }

    /// Sum-to-zero transform for the given column sums.
    pub fn from_column_sums(sums: &DMatrix<f64>, scale: f64) -> Self {
        let k = sums.ncols();
        let norm = sums.norm();
        if norm <= 1e-12 * scale.max(1.0) {
            return Self::identity(k);
        }
        ConstraintTransform {
            z: householder_null_space(&sums.transpose()),
            degenerate: false,
        }
    }
}

/// Absorbs the sum-to-zero constraint 1ᵀBβ = 0 into the basis:
/// B̃ = BZ, S̃ = ZᵀSZ, with Z spanning the null space of the column sums.
///
/// An already-centred basis gets an identity transform flagged
/// `degenerate`; absorbing twice is therefore the same as absorbing once.
pub fn absorb_constraint(
    b: &BasisMatrix,
    s: &PenaltyMatrix,
) -> Result<(BasisMatrix, PenaltyMatrix, ConstraintTransform), BasisError> {
    let k = b.values.ncols();
    if k < 2 {
        return Err(BasisError::Dimension(
            "sum-to-zero constraint needs at least 2 basis columns".into(),
        ));
    }
    if s.dim() != k {
        return Err(BasisError::Dimension(format!(
            "penalty is {0}x{0} but basis has {k} columns",
            s.dim()
        )));
    }
    let sums = DMatrix::from_fn(1, k, |_, j| b.values.column(j).sum());
    let scale = b.values.iter().fold(0.0_f64, |a, v| a.max(v.abs())) * (b.values.nrows() as f64).sqrt();
    let transform = ConstraintTransform::from_column_sums(&sums, scale);
    if transform.degenerate {
        return Ok((b.clone(), s.clone(), transform));
    }
    let z = &transform.z;
    let bt = BasisMatrix {
        values: &b.values * z,
        spec: b.spec.clone(),
    };
    let st = z.transpose() * &s.values * z;
    let st = (&st + st.transpose()) * 0.5;
    // The constant lies in the penalty null space, so the rank is unchanged
    // while the null space loses one dimension.
    let rank = s.rank.min(k - 1);
    Ok((bt, PenaltyMatrix::new(st, rank), transform))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{bspline_basis, bspline_penalty, BasisSpec};

    #[test]
    fn two_column_hand_example() {
        let b = BasisMatrix {
            values: DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, -1.0]),
            spec: BasisSpec::bspline("x", 5),
        };
        let s = PenaltyMatrix::new(DMatrix::zeros(2, 2), 0);
        let (bt, _, t) = absorb_constraint(&b, &s).unwrap();
        assert_eq!(t.z.shape(), (2, 1));
        assert!(t.z[(0, 0)].abs() < 1e-15);
        assert!((t.z[(1, 0)].abs() - 1.0).abs() < 1e-15);
        let sign = t.z[(1, 0)];
        assert!((bt.values[(0, 0)] - sign).abs() < 1e-15);
        assert!((bt.values[(1, 0)] + sign).abs() < 1e-15);
    }

    #[test]
    fn centred_columns_and_null_space_bookkeeping() {
        let x: Vec<f64> = (0..60).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
        let b = bspline_basis(&x, &BasisSpec::bspline("x", 10)).unwrap();
        let s = bspline_penalty(&b.spec).unwrap();
        assert_eq!(s.null_space_dim(), 2);
        let (bt, st, t) = absorb_constraint(&b, &s).unwrap();
        for j in 0..bt.values.ncols() {
            assert!(bt.values.column(j).sum().abs() < 1e-10);
        }
        assert!((t.z.transpose() * &t.z - DMatrix::identity(9, 9)).norm() < 1e-12);
        assert_eq!(st.null_space_dim(), 1);
    }

    #[test]
    fn absorbing_twice_is_idempotent() {
        let x: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let b = bspline_basis(&x, &BasisSpec::bspline("x", 8)).unwrap();
        let s = bspline_penalty(&b.spec).unwrap();
        let (b1, s1, _) = absorb_constraint(&b, &s).unwrap();
        let (b2, s2, t2) = absorb_constraint(&b1, &s1).unwrap();
        assert!(t2.degenerate);
        assert!((t2.z.clone() - DMatrix::identity(7, 7)).norm() < 1e-12);
        assert_eq!(b1, b2);
        assert_eq!(s1, s2);
    }
}
