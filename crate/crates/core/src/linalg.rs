//! Small dense linear-algebra helpers shared by the basis and fitting code.

use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};

/// Orthonormal basis for the null space of `cᵀ`, where the columns of `c`
/// (k × m, full column rank) are the constraint vectors. Computed from a
/// complete Householder QR of `c`; the result is k × (k − m).
pub(crate) fn householder_null_space(c: &DMatrix<f64>) -> DMatrix<f64> {
    let (k, m) = c.shape();
    assert!(m <= k, "more constraints than coefficients");
    let mut a = c.clone();
    let mut q = DMatrix::<f64>::identity(k, k);
    for j in 0..m {
        let x = a.view((j, j), (k - j, 1)).clone_owned();
        let norm = x.norm();
        if norm == 0.0 {
            continue;
        }
        let mut v = x;
        let alpha = if v[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vnorm2 = v.norm_squared();
        if vnorm2 == 0.0 {
            continue;
        }
        // a ← H a on rows j.., q ← q H on columns j..
        for col in j..m {
            let mut s = 0.0;
            for r in 0..k - j {
                s += v[r] * a[(j + r, col)];
            }
            let f = 2.0 * s / vnorm2;
            for r in 0..k - j {
                a[(j + r, col)] -= f * v[r];
            }
        }
        for row in 0..k {
            let mut s = 0.0;
            for r in 0..k - j {
                s += q[(row, j + r)] * v[r];
            }
            let f = 2.0 * s / vnorm2;
            for r in 0..k - j {
                q[(row, j + r)] -= f * v[r];
            }
        }
    }
    q.columns(m, k - m).clone_owned()
}

/// Orthonormal null space of a possibly rank-deficient constraint matrix
/// `c` (m × k). Returns (basis k × (k − rank), rank).
pub(crate) fn svd_null_space(c: &DMatrix<f64>, rel_tol: f64) -> (DMatrix<f64>, usize) {
    let k = c.ncols();
    // Eigen-decomposition of cᵀc: the null space of c is the eigenspace of
    // zero eigenvalues.
    let ctc = c.transpose() * c;
    let (values, vectors) = sym_eigen_desc(&ctc);
    let max = values.iter().cloned().fold(0.0_f64, f64::max);
    let rank = values.iter().filter(|&&v| v > rel_tol * max.max(f64::MIN_POSITIVE)).count();
    (vectors.columns(rank, k - rank).clone_owned(), rank)
}

/// Symmetric eigen-decomposition with eigenvalues sorted in descending order.
pub(crate) fn sym_eigen_desc(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Cholesky factorization; on failure retries once with a ridge of
/// `1e-10 · max|diag|`.
pub(crate) fn cholesky_with_ridge(m: &DMatrix<f64>) -> Option<(Cholesky<f64, Dyn>, bool)> {
    if let Some(ch) = Cholesky::new(m.clone()) {
        return Some((ch, false));
    }
    let maxd = m.diagonal().iter().fold(0.0_f64, |a, &b| a.max(b.abs()));
    let mut r = m.clone();
    for i in 0..r.nrows() {
        r[(i, i)] += 1e-10 * maxd.max(f64::MIN_POSITIVE);
    }
    Cholesky::new(r).map(|ch| (ch, true))
}

pub(crate) fn chol_logdet(ch: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Gauss–Legendre nodes and weights on [-1, 1], exact for polynomials of
/// degree 2n − 1.
pub(crate) fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for j in 2..=n {
                let p2 = ((2 * j - 1) as f64 * x * p1 - (j - 1) as f64 * p0) / j as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 { 1.0 } else if n == 1 { x } else { p1 };
            let pn1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pn1) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

/// Row-major serialization for dense matrices in model archives.
pub mod serde_dmatrix {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct RowMajor {
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        RowMajor {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rm = RowMajor::deserialize(d)?;
        if rm.data.len() != rm.rows * rm.cols {
            return Err(serde::de::Error::custom("matrix data length mismatch"));
        }
        Ok(DMatrix::from_row_slice(rm.rows, rm.cols, &rm.data))
    }
}

pub mod serde_dvector {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        for n in 1..8 {
            let (x, w) = gauss_legendre(n);
            for deg in 0..(2 * n) {
                let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(deg as i32)).sum();
                let exact = if deg % 2 == 1 { 0.0 } else { 2.0 / (deg as f64 + 1.0) };
                assert!((q - exact).abs() < 1e-13, "n={n} deg={deg} q={q}");
            }
        }
    }

    #[test]
    fn householder_null_space_is_orthonormal_complement() {
        let c = DMatrix::from_column_slice(4, 2, &[1.0, 2.0, 3.0, 4.0, 0.5, -1.0, 0.0, 2.0]);
        let z = householder_null_space(&c);
        assert_eq!(z.shape(), (4, 2));
        assert!((z.transpose() * &z - DMatrix::identity(2, 2)).norm() < 1e-14);
        assert!((c.transpose() * &z).norm() < 1e-13);
    }

    #[test]
    fn svd_null_space_handles_redundant_rows() {
        let c = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 1.0, -1.0, 0.0]);
        let (z, rank) = svd_null_space(&c, 1e-10);
        assert_eq!(rank, 2);
        assert_eq!(z.ncols(), 1);
        assert!((&c * &z).norm() < 1e-12);
    }
}
