use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix3};
use serde::{Deserialize, Serialize};

use super::FitError;
use crate::data::Dataset;

const MAX_ITER: usize = 500;

/// Wood's lactation curve y = α t^δ exp(κ t), fitted by nonlinear least
/// squares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WoodFit {
    pub alpha: f64,
    pub delta: f64,
    pub kappa: f64,
    pub rss: f64,
    /// RSS / (n − 3).
    pub residual_variance: f64,
    pub rmse: f64,
    /// Covariance of (α, δ, κ), row-major.
    pub covariance: [[f64; 3]; 3],
    /// Three curve parameters plus the residual variance.
    pub df: usize,
    pub log_likelihood: f64,
    pub aic: f64,
    pub n: usize,
    pub iterations: usize,
}

impl WoodFit {
    pub fn predict(&self, t: f64) -> f64 {
        wood_curve(self.alpha, self.delta, self.kappa, t)
    }
}

pub fn wood_curve(alpha: f64, delta: f64, kappa: f64, t: f64) -> f64 {
    alpha * t.powf(delta) * (kappa * t).exp()
}

/// Least-squares start values from log y = log α + δ log t + κ t.
pub fn wood_start(t: &[f64], y: &[f64]) -> Result<[f64; 3], FitError> {
    let n = t.len();
    let x = DMatrix::from_fn(n, 3, |i, j| match j {
        0 => 1.0,
        1 => t[i].ln(),
        _ => t[i],
    });
    let ly = DVector::from_iterator(n, y.iter().map(|v| v.ln()));
    let xtx = x.tr_mul(&x);
    let b = xtx
        .cholesky()
        .ok_or_else(|| FitError::Rank {
            term: "log-linear start regression".into(),
        })?
        .solve(&x.tr_mul(&ly));
    Ok([b[0].exp(), b[1], b[2]])
}

fn residuals_and_jacobian(theta: &[f64; 3], t: &[f64], y: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let n = t.len();
    let mut r = DVector::zeros(n);
    let mut j = DMatrix::zeros(n, 3);
    for i in 0..n {
        let g = t[i].powf(theta[1]) * (theta[2] * t[i]).exp();
        let f = theta[0] * g;
        r[i] = y[i] - f;
        j[(i, 0)] = g;
        j[(i, 1)] = f * t[i].ln();
        j[(i, 2)] = f * t[i];
    }
    (r, j)
}

/// Levenberg–Marquardt fit of Wood's curve with an analytic Jacobian.
pub fn fit_wood(t: &[f64], y: &[f64]) -> Result<WoodFit, FitError> {
    let n = t.len();
    if n != y.len() || n < 4 {
        return Err(FitError::Input("Wood fit needs at least 4 paired observations".into()));
    }
    if t.iter().any(|&v| !(v > 0.0)) || y.iter().any(|&v| !(v > 0.0)) {
        return Err(FitError::Input("Wood fit needs positive times and responses".into()));
    }
    let mut theta = wood_start(t, y)?;
    let (mut r, mut jac) = residuals_and_jacobian(&theta, t, y);
    let mut rss = r.norm_squared();
    let mut damping = 1e-3;
    let mut iterations = 0;
    let mut converged = false;
    for iter in 0..MAX_ITER {
        iterations = iter;
        let grad = jac.tr_mul(&r);
        let scale = jac.norm() * r.norm();
        if grad.amax() <= 1e-8 * scale.max(f64::MIN_POSITIVE) || rss <= 1e-28 * y.iter().map(|v| v * v).sum::<f64>() {
            converged = true;
            break;
        }
        let jtj = jac.tr_mul(&jac);
        let mut stepped = false;
        for _ in 0..60 {
            let mut a = jtj.clone();
            for d in 0..3 {
                a[(d, d)] += damping * jtj[(d, d)].max(1e-300);
            }
            let Some(ch) = a.cholesky() else {
                damping *= 10.0;
                continue;
            };
            let step = ch.solve(&grad);
            let trial = [theta[0] + step[0], theta[1] + step[1], theta[2] + step[2]];
            let (rt, jt) = residuals_and_jacobian(&trial, t, y);
            let rss_t = rt.norm_squared();
            if rss_t.is_finite() && rss_t <= rss {
                let rel = (rss - rss_t) / rss.max(f64::MIN_POSITIVE);
                let small_step = step.amax() <= 1e-15 * (1.0 + theta.iter().fold(0.0_f64, |m, v| m.max(v.abs())));
                theta = trial;
                r = rt;
                jac = jt;
                rss = rss_t;
                damping = (damping / 10.0).max(1e-15);
                stepped = true;
                if rel < 1e-15 && small_step {
                    converged = true;
                }
                break;
            }
            damping *= 10.0;
        }
        if converged {
            break;
        }
        if !stepped {
            // No reduction possible at any damping: at a minimum to
            // machine precision.
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(FitError::NonConvergence {
            iterations: MAX_ITER,
            message: format!(
                "Levenberg–Marquardt did not converge; last (α, δ, κ) = ({}, {}, {}), RSS = {rss}",
                theta[0], theta[1], theta[2]
            ),
        });
    }
    let jtj: Matrix3<f64> = Matrix3::from_fn(|a, b| jac.column(a).dot(&jac.column(b)));
    let s2 = rss / (n as f64 - 3.0);
    let cov = jtj.try_inverse().map(|m| m * s2).unwrap_or_else(|| Matrix3::from_element(f64::NAN));
    let mut covariance = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            covariance[a][b] = cov[(a, b)];
        }
    }
    let nf = n as f64;
    let sigma2_ml = rss / nf;
    let log_likelihood = -0.5 * nf * ((2.0 * PI * sigma2_ml).ln() + 1.0);
    Ok(WoodFit {
        alpha: theta[0],
        delta: theta[1],
        kappa: theta[2],
        rss,
        residual_variance: s2,
        rmse: (rss / nf).sqrt(),
        covariance,
        df: 4,
        log_likelihood,
        aic: -2.0 * log_likelihood + 2.0 * 4.0,
        n,
        iterations,
    })
}

/// Fits Wood's curve to the dataset response against column `time`.
pub fn fit_wood_lactation(data: &Dataset, time: &str) -> Result<WoodFit, crate::Error> {
    let t = data.numeric(time)?;
    Ok(fit_wood(t, data.response())?)
}
