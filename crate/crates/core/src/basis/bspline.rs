use nalgebra::DMatrix;

use super::{unique_sorted, BasisError, BasisKind, BasisMatrix, BasisSpec, PenaltyMatrix};
use crate::linalg::gauss_legendre;

/// Clamped knot vector with `k - degree - 1` interior knots at evenly spaced
/// (type-7) quantiles of the unique covariate values.
pub fn quantile_knots(x: &[f64], k: usize, degree: usize) -> Result<Vec<f64>, BasisError> {
    if k < degree + 1 {
        return Err(BasisError::Dimension(format!(
            "k = {k} is too small for degree {degree}"
        )));
    }
    let u = unique_sorted(x);
    let n_interior = k - degree - 1;
    if u.len() < n_interior + 2 {
        return Err(BasisError::Dimension(format!(
            "{} unique covariate values cannot support {} interior knots (k = {k})",
            u.len(),
            n_interior
        )));
    }
    let (lo, hi) = (u[0], u[u.len() - 1]);
    let mut knots = vec![lo; degree + 1];
    for j in 1..=n_interior {
        let h = (u.len() - 1) as f64 * j as f64 / (n_interior + 1) as f64;
        let i = h.floor() as usize;
        let frac = h - i as f64;
        let q = if i + 1 < u.len() {
            u[i] + frac * (u[i + 1] - u[i])
        } else {
            u[i]
        };
        knots.push(q);
    }
    knots.extend(std::iter::repeat(hi).take(degree + 1));
    Ok(knots)
}

/// Index of the knot interval [t_i, t_{i+1}) used to evaluate at `x`; the
/// right boundary maps to the last non-empty interval.
fn span_index(knots: &[f64], x: f64) -> usize {
    let mut first = None;
    let mut last = 0;
    for i in 0..knots.len() - 1 {
        if knots[i] < knots[i + 1] {
            if first.is_none() {
                first = Some(i);
            }
            last = i;
            if knots[i] <= x && x < knots[i + 1] {
                return i;
            }
        }
    }
    match first {
        Some(f) if x < knots[f] => f,
        _ => last,
    }
}

/// All B-splines of degree `q` defined on `knots`, evaluated at `x`
/// (length `knots.len() - q - 1`), by the triangular Cox–de Boor scheme.
fn cox_de_boor_all(knots: &[f64], q: usize, x: f64) -> Vec<f64> {
    let m = knots.len() - 1;
    let mut b = vec![0.0; m];
    b[span_index(knots, x)] = 1.0;
    for p in 1..=q {
        let mut nb = vec![0.0; m - p];
        for (i, out) in nb.iter_mut().enumerate() {
            let d1 = knots[i + p] - knots[i];
            let d2 = knots[i + p + 1] - knots[i + 1];
            let mut v = 0.0;
            if d1 > 0.0 {
                v += (x - knots[i]) / d1 * b[i];
            }
            if d2 > 0.0 {
                v += (knots[i + p + 1] - x) / d2 * b[i + 1];
            }
            *out = v;
        }
        b = nb;
    }
    b
}

/// One row of the degree-`degree` basis at `x`.
pub fn bspline_row(knots: &[f64], degree: usize, x: f64) -> Vec<f64> {
    cox_de_boor_all(knots, degree, x)
}

/// `order`-th derivative of every basis function at `x`.
pub fn bspline_row_derivative(knots: &[f64], degree: usize, x: f64, order: usize) -> Vec<f64> {
    if order == 0 {
        return cox_de_boor_all(knots, degree, x);
    }
    let n = knots.len() - degree - 1;
    if order > degree {
        return vec![0.0; n];
    }
    let lower = bspline_row_derivative(knots, degree - 1, x, order - 1);
    let p = degree as f64;
    (0..n)
        .map(|i| {
            let d1 = knots[i + degree] - knots[i];
            let d2 = knots[i + degree + 1] - knots[i + 1];
            let mut v = 0.0;
            if d1 > 0.0 {
                v += p * lower[i] / d1;
            }
            if d2 > 0.0 {
                v -= p * lower[i + 1] / d2;
            }
            v
        })
        .collect()
}

/// Greville abscissae: coefficients equal to these reproduce f(x) = x.
pub fn greville(knots: &[f64], degree: usize) -> Vec<f64> {
    let n = knots.len() - degree - 1;
    (0..n)
        .map(|j| knots[j + 1..=j + degree].iter().sum::<f64>() / degree as f64)
        .collect()
}

/// Evaluates a B-spline basis at `x`. The returned matrix carries the
/// resolved knot vector in `spec.knots`.
pub fn bspline_basis(x: &[f64], spec: &BasisSpec) -> Result<BasisMatrix, BasisError> {
    if spec.kind != BasisKind::Bspline {
        return Err(BasisError::InvalidSpec("expected a B-spline spec".into()));
    }
    spec.validate()?;
    if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
        return Err(BasisError::InvalidSpec(format!("non-finite covariate value {bad}")));
    }
    if x.is_empty() {
        return Err(BasisError::Dimension("empty covariate".into()));
    }
    let knots = match &spec.knots {
        Some(t) => {
            let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if t[0] > lo || t[t.len() - 1] < hi {
                return Err(BasisError::InvalidSpec(
                    "explicit knots do not span the covariate range".into(),
                ));
            }
            t.clone()
        }
        None => quantile_knots(x, spec.k, spec.degree)?,
    };
    let mut values = DMatrix::zeros(x.len(), spec.k);
    for (i, &xi) in x.iter().enumerate() {
        for (j, v) in bspline_row(&knots, spec.degree, xi).into_iter().enumerate() {
            values[(i, j)] = v;
        }
    }
    let mut resolved = spec.clone();
    resolved.knots = Some(knots);
    Ok(BasisMatrix {
        values,
        spec: resolved,
    })
}

/// Exact Gram matrix of second derivatives, S_uv = ∫ b_u'' b_v'' over the
/// knot span. Each knot interval is integrated with a Gauss–Legendre rule
/// that is exact for the piecewise-polynomial integrand.
pub fn bspline_penalty(spec: &BasisSpec) -> Result<PenaltyMatrix, BasisError> {
    if spec.kind != BasisKind::Bspline {
        return Err(BasisError::InvalidSpec("expected a B-spline spec".into()));
    }
    if spec.degree < 2 {
        return Err(BasisError::UnsupportedPenalty(format!(
            "second-derivative penalty needs degree >= 2, got {}",
            spec.degree
        )));
    }
    spec.validate()?;
    let knots = spec
        .knots
        .as_ref()
        .ok_or_else(|| BasisError::InvalidSpec("knot vector not resolved".into()))?;
    let k = spec.k;
    let (nodes, weights) = gauss_legendre(spec.degree);
    let mut s = DMatrix::zeros(k, k);
    for j in 0..knots.len() - 1 {
        let (a, b) = (knots[j], knots[j + 1]);
        if !(b > a) {
            continue;
        }
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        for (t, w) in nodes.iter().zip(&weights) {
            let d2 = bspline_row_derivative(knots, spec.degree, mid + half * t, 2);
            let wt = w * half;
            for u in 0..k {
                if d2[u] == 0.0 {
                    continue;
                }
                for v in 0..k {
                    s[(u, v)] += wt * d2[u] * d2[v];
                }
            }
        }
    }
    let s = (&s + s.transpose()) * 0.5;
    Ok(PenaltyMatrix::new(s, k - 2))
}
