use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::FitError;
use crate::design::Design;
use crate::family::{Family, FamilyKind, Link};
use crate::linalg::{cholesky_with_ridge, sym_eigen_desc};

const MAX_ITER: usize = 200;
const TOL: f64 = 1e-9;
const MAX_HALVINGS: usize = 40;

/// Result of penalized IRLS at fixed smoothing parameters.
#[derive(Debug, Clone)]
pub struct InnerFit {
    pub beta: DVector<f64>,
    pub eta: DVector<f64>,
    pub mu: DVector<f64>,
    /// IRLS weights at the final mean.
    pub w: DVector<f64>,
    pub deviance: f64,
    /// βᵀ S_λ β.
    pub penalty: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Set when the penalized Hessian needed a ridge to factorize.
    pub ridged: bool,
    pub(crate) xtwx: DMatrix<f64>,
    pub(crate) chol: Cholesky<f64, Dyn>,
}

impl InnerFit {
    /// Relative residual of the penalized normal equations at the final
    /// weights, ‖(XᵀWX + S_λ)β − XᵀWz‖ / ‖XᵀWz‖.
    pub fn normal_equation_residual(&self, problem: &Problem, lambdas: &[f64]) -> f64 {
        let s = problem.design.total_penalty(lambdas);
        let z = problem.working_response(&self.eta, &self.mu);
        let wz = self.w.component_mul(&z);
        let rhs = problem.x.tr_mul(&wz);
        let lhs = (&self.xtwx + s) * &self.beta;
        (lhs - &rhs).norm() / rhs.norm().max(f64::MIN_POSITIVE)
    }
}

/// Data and design for repeated PIRLS solves.
pub struct Problem<'a> {
    pub design: &'a Design,
    pub x: &'a DMatrix<f64>,
    pub y: &'a [f64],
    pub w: &'a [f64],
    pub family: Family,
    /// XᵀWX and XᵀWy with prior weights, cached for gaussian identity fits.
    gauss: Option<(DMatrix<f64>, DVector<f64>)>,
}

impl<'a> Problem<'a> {
    pub fn new(design: &'a Design, x: &'a DMatrix<f64>, y: &'a [f64], w: &'a [f64], family: Family) -> Result<Self, FitError> {
        if family.kind == FamilyKind::Tweedie && family.power.is_none() {
            return Err(FitError::Input("Tweedie power must be fixed for a single fit".into()));
        }
        for &yi in y {
            family.check_response(yi)?;
        }
        let gauss = if family.kind == FamilyKind::Gaussian && family.link == Link::Identity {
            let wv = DVector::from_column_slice(w);
            let xtwx = weighted_crossprod(x, &wv);
            let wy = DVector::from_iterator(y.len(), y.iter().zip(w).map(|(a, b)| a * b));
            Some((xtwx, x.tr_mul(&wy)))
        } else {
            None
        };
        Ok(Problem {
            design,
            x,
            y,
            w,
            family,
            gauss,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    fn deviance(&self, mu: &DVector<f64>) -> Option<f64> {
        self.family.deviance(self.y, mu.as_slice(), self.w).ok().filter(|d| d.is_finite())
    }

    fn working_weights(&self, eta: &DVector<f64>, mu: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.n(), |i, _| {
            let d = self.family.mu_eta(eta[i]);
            self.w[i] * d * d / self.family.variance(mu[i])
        })
    }

    fn working_response(&self, eta: &DVector<f64>, mu: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.n(), |i, _| eta[i] + (self.y[i] - mu[i]) / self.family.mu_eta(eta[i]))
    }

    fn initial_eta(&self) -> Result<DVector<f64>, FitError> {
        let sw: f64 = self.w.iter().sum();
        let ybar = self.y.iter().zip(self.w).map(|(a, b)| a * b).sum::<f64>() / sw;
        let mut eta = DVector::zeros(self.n());
        for i in 0..self.n() {
            let mu0 = match self.family.kind {
                FamilyKind::Gaussian if self.family.link == Link::Identity => self.y[i],
                FamilyKind::Gaussian => self.y[i].max(1e-3 * ybar.abs().max(1e-8)),
                FamilyKind::Gamma => self.y[i],
                FamilyKind::Tweedie => 0.5 * (self.y[i] + ybar),
            };
            eta[i] = self.family.link_apply(mu0)?;
        }
        Ok(eta)
    }

    /// Penalized IRLS at smoothing parameters `lambdas`, optionally warm
    /// started from `start`.
    pub fn fit(&self, lambdas: &[f64], start: Option<&DVector<f64>>) -> Result<InnerFit, FitError> {
        let s = self.design.total_penalty(lambdas);
        if let Some((xtwx, xtwy)) = &self.gauss {
            let h = xtwx + &s;
            let (chol, ridged) = cholesky_with_ridge(&h).ok_or_else(|| rank_error(self, lambdas))?;
            let beta = chol.solve(xtwy);
            let eta = self.x * &beta;
            let mu = eta.clone();
            let deviance = self.deviance(&mu).ok_or_else(|| FitError::Numerical("non-finite deviance".into()))?;
            let penalty = beta.dot(&(&s * &beta));
            return Ok(InnerFit {
                beta,
                w: DVector::from_column_slice(self.w),
                eta,
                mu,
                deviance,
                penalty,
                converged: true,
                iterations: 1,
                ridged,
                xtwx: xtwx.clone(),
                chol,
            });
        }

        let mut eta = match start {
            Some(b) => self.x * b,
            None => self.initial_eta()?,
        };
        let mut mu = eta.map(|e| self.family.link_invert(e));
        let mut beta_old: Option<DVector<f64>> = start.cloned();
        let mut pdev_old = match (start, self.deviance(&mu)) {
            (Some(b), Some(d)) => d + b.dot(&(&s * b)),
            (Some(_), None) => {
                beta_old = None;
                eta = self.initial_eta()?;
                mu = eta.map(|e| self.family.link_invert(e));
                f64::INFINITY
            }
            _ => f64::INFINITY,
        };
        let mut converged = false;
        let mut extra = 0;
        let mut iterations = 0;
        let mut ridged = false;
        let mut beta = DVector::zeros(self.x.ncols());
        let mut deviance = f64::NAN;
        for iter in 1..=MAX_ITER {
            iterations = iter;
            let wts = self.working_weights(&eta, &mu);
            let z = self.working_response(&eta, &mu);
            let xtwx = weighted_crossprod(self.x, &wts);
            let h = &xtwx + &s;
            let (chol, r) = cholesky_with_ridge(&h).ok_or_else(|| rank_error(self, lambdas))?;
            ridged |= r;
            let rhs = self.x.tr_mul(&wts.component_mul(&z));
            let mut candidate = chol.solve(&rhs);
            let mut halvings = 0;
            let (new_eta, new_mu, dev, pdev) = loop {
                let e = self.x * &candidate;
                let m = e.map(|v| self.family.link_invert(v));
                if let Some(d) = self.deviance(&m) {
                    let p = d + candidate.dot(&(&s * &candidate));
                    if p.is_finite() && (p <= pdev_old * (1.0 + 1e-12) + 1e-12 || beta_old.is_none()) {
                        break (e, m, d, p);
                    }
                }
                match &beta_old {
                    Some(b) if halvings < MAX_HALVINGS => {
                        candidate = (&candidate + b) * 0.5;
                        halvings += 1;
                    }
                    Some(b) => {
                        // No decrease found: stay at the previous iterate.
                        candidate = b.clone();
                        let e = self.x * &candidate;
                        let m = e.map(|v| self.family.link_invert(v));
                        let d = self.deviance(&m).unwrap_or(f64::NAN);
                        break (e, m, d, pdev_old);
                    }
                    None => {
                        return Err(FitError::NonConvergence {
                            iterations: iter,
                            message: "first IRLS step gives means outside the family's support".into(),
                        })
                    }
                }
            };
            let change = (pdev - pdev_old).abs() / (pdev.abs() + 0.1);
            let eta_change = (&new_eta - &eta).amax() / (1.0 + new_eta.amax());
            beta = candidate;
            eta = new_eta;
            mu = new_mu;
            deviance = dev;
            pdev_old = pdev;
            beta_old = Some(beta.clone());
            if change < TOL {
                converged = true;
                // A few extra steps tighten β so criteria are smooth in λ.
                if eta_change < 1e-11 || extra >= 25 {
                    break;
                }
                extra += 1;
            }
        }
        if !converged {
            return Err(FitError::NonConvergence {
                iterations,
                message: format!("penalized deviance still changing after {MAX_ITER} iterations (last deviance {deviance})"),
            });
        }
        let wts = self.working_weights(&eta, &mu);
        let xtwx = weighted_crossprod(self.x, &wts);
        let (chol, r) = cholesky_with_ridge(&(&xtwx + &s)).ok_or_else(|| rank_error(self, lambdas))?;
        let penalty = beta.dot(&(&s * &beta));
        Ok(InnerFit {
            beta,
            eta,
            mu,
            w: wts,
            deviance,
            penalty,
            converged,
            iterations,
            ridged: ridged || r,
            xtwx,
            chol,
        })
    }

    /// Confirms the penalized design is identifiable at `lambdas`; names
    /// the first term at which rank is lost otherwise.
    /// Identifiability depends only on which penalties are active, so the
    /// check uses unit smoothing parameters for every non-zero λ.
    pub fn check_identifiable(&self, lambdas: &[f64]) -> Result<(), FitError> {
        let probe: Vec<f64> = lambdas.iter().map(|&l| if l > 0.0 { 1.0 } else { 0.0 }).collect();
        if deficient(self, &probe, self.x.ncols()) {
            Err(rank_error(self, &probe))
        } else {
            Ok(())
        }
    }
}

/// Xᵀ diag(w) X.
pub(crate) fn weighted_crossprod(x: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut xw = x.clone();
    for mut col in xw.column_iter_mut() {
        for (i, v) in col.iter_mut().enumerate() {
            *v *= w[i].sqrt();
        }
    }
    xw.tr_mul(&xw)
}

/// Whether the leading `p` columns of XᵀX + S_λ are numerically singular.
fn deficient(problem: &Problem, lambdas: &[f64], p: usize) -> bool {
    let wv = DVector::from_column_slice(problem.w);
    let x = problem.x.columns(0, p).clone_owned();
    let mut a = weighted_crossprod(&x, &wv);
    let s = problem.design.total_penalty(lambdas);
    a += s.view((0, 0), (p, p));
    let d: Vec<f64> = (0..p).map(|i| a[(i, i)].max(f64::MIN_POSITIVE).sqrt()).collect();
    let scaled = DMatrix::from_fn(p, p, |i, j| a[(i, j)] / (d[i] * d[j]));
    let (vals, _) = sym_eigen_desc(&scaled);
    let max = vals[0];
    vals[p - 1] <= 1e-11 * max
}

fn rank_error(problem: &Problem, lambdas: &[f64]) -> FitError {
    for t in &problem.design.terms {
        if deficient(problem, lambdas, t.end) {
            return FitError::Rank {
                term: t.spec.label.clone(),
            };
        }
    }
    FitError::Rank {
        term: problem.design.terms.last().map(|t| t.spec.label.clone()).unwrap_or_default(),
    }
}
