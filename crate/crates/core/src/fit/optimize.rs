//! Derivative-free minimization over log smoothing parameters.

use nalgebra::{DMatrix, DVector};

pub(crate) const RHO_MIN: f64 = -12.0;
pub(crate) const RHO_MAX: f64 = 12.0;

#[derive(Debug, Clone)]
pub(crate) struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
    pub converged: bool,
}

fn clamp(x: &mut [f64]) {
    for v in x.iter_mut() {
        *v = v.clamp(RHO_MIN, RHO_MAX);
    }
}

/// Nelder–Mead with the standard coefficients, projecting every trial point
/// into the box [RHO_MIN, RHO_MAX]. Non-finite values count as +∞.
pub(crate) fn nelder_mead<F: FnMut(&[f64]) -> f64>(mut f: F, x0: &[f64], step: f64, max_evals: usize) -> Minimum {
    let n = x0.len();
    let mut evals = 0;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let mut start = x0.to_vec();
    clamp(&mut start);
    let mut simplex: Vec<Vec<f64>> = vec![start.clone()];
    for i in 0..n {
        let mut p = start.clone();
        p[i] += if p[i] + step <= RHO_MAX { step } else { -step };
        simplex.push(p);
    }
    let mut values: Vec<f64> = simplex.iter().map(|p| eval(p, &mut evals)).collect();
    let mut converged = false;
    while evals < max_evals {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let spread = (values[n] - values[0]).abs();
        let size = simplex[1..]
            .iter()
            .map(|p| p.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if spread <= 1e-10 * (1.0 + values[0].abs()) && size < 1e-6 {
            converged = true;
            break;
        }
        if size < 1e-10 {
            converged = true;
            break;
        }

        let centroid: Vec<f64> = (0..n).map(|j| simplex[..n].iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
        let towards = |t: f64, simplex: &Vec<Vec<f64>>| -> Vec<f64> {
            let mut p: Vec<f64> = (0..n).map(|j| centroid[j] + t * (simplex[n][j] - centroid[j])).collect();
            clamp(&mut p);
            p
        };
        let xr = towards(-1.0, &simplex);
        let fr = eval(&xr, &mut evals);
        if fr < values[0] {
            let xe = towards(-2.0, &simplex);
            let fe = eval(&xe, &mut evals);
            if fe < fr {
                simplex[n] = xe;
                values[n] = fe;
            } else {
                simplex[n] = xr;
                values[n] = fr;
            }
        } else if fr < values[n - 1] {
            simplex[n] = xr;
            values[n] = fr;
        } else {
            let (xc, fc) = if fr < values[n] {
                let xc = towards(-0.5, &simplex);
                let fc = eval(&xc, &mut evals);
                (xc, fc)
            } else {
                let xc = towards(0.5, &simplex);
                let fc = eval(&xc, &mut evals);
                (xc, fc)
            };
            if fc < values[n].min(fr) {
                simplex[n] = xc;
                values[n] = fc;
            } else {
                for i in 1..=n {
                    let p: Vec<f64> = (0..n).map(|j| simplex[0][j] + 0.5 * (simplex[i][j] - simplex[0][j])).collect();
                    values[i] = eval(&p, &mut evals);
                    simplex[i] = p;
                }
            }
        }
    }
    let best = (0..=n).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap();
    Minimum {
        x: simplex[best].clone(),
        value: values[best],
        evaluations: evals,
        converged,
    }
}

/// Central finite-difference gradient; coordinates at a bound use a
/// one-sided difference pointing into the box.
pub(crate) fn fd_gradient<F: FnMut(&[f64]) -> f64>(f: &mut F, x: &[f64], h: f64) -> Vec<f64> {
    let n = x.len();
    let mut g = vec![0.0; n];
    let f0 = if x.iter().any(|&v| v - h < RHO_MIN || v + h > RHO_MAX) {
        f(x)
    } else {
        f64::NAN
    };
    for i in 0..n {
        let mut up = x.to_vec();
        let mut dn = x.to_vec();
        if x[i] + h > RHO_MAX {
            dn[i] -= h;
            g[i] = (f0 - f(&dn)) / h;
        } else if x[i] - h < RHO_MIN {
            up[i] += h;
            g[i] = (f(&up) - f0) / h;
        } else {
            up[i] += h;
            dn[i] -= h;
            g[i] = (f(&up) - f(&dn)) / (2.0 * h);
        }
    }
    g
}

/// Whether coordinate `i` sits on a bound with the criterion still
/// decreasing outward, so it takes no part in stationarity.
pub(crate) fn pinned(x: f64, g: f64) -> bool {
    (x >= RHO_MAX - 1e-9 && g <= 0.0) || (x <= RHO_MIN + 1e-9 && g >= 0.0)
}

/// Newton refinement with a finite-difference Hessian over the free
/// coordinates. Falls back to scaled gradient steps when the Hessian is
/// not positive definite. Only ever accepts improvements.
pub(crate) fn newton_polish<F: FnMut(&[f64]) -> f64>(f: &mut F, start: &Minimum, max_iter: usize) -> Minimum {
    let mut x = start.x.clone();
    let mut fx = start.value;
    let mut evals = start.evaluations;
    let n = x.len();
    let h = 1e-3;
    for _ in 0..max_iter {
        let g = fd_gradient(f, &x, 1e-4);
        evals += 2 * n;
        let free: Vec<usize> = (0..n).filter(|&i| !pinned(x[i], g[i])).collect();
        if free.is_empty() || free.iter().all(|&i| g[i].abs() < 1e-6) {
            break;
        }
        let m = free.len();
        let mut hess = DMatrix::zeros(m, m);
        for (a, &i) in free.iter().enumerate() {
            for (b, &j) in free.iter().enumerate().skip(a) {
                let mut eval_at = |di: f64, dj: f64| {
                    let mut p = x.clone();
                    p[i] += di;
                    p[j] += dj;
                    f(&p)
                };
                let v = if i == j {
                    (eval_at(h, 0.0) - 2.0 * fx + eval_at(-h, 0.0)) / (h * h)
                } else {
                    (eval_at(h, h) - eval_at(h, -h) - eval_at(-h, h) + eval_at(-h, -h)) / (4.0 * h * h)
                };
                evals += if i == j { 2 } else { 4 };
                hess[(a, b)] = v;
                hess[(b, a)] = v;
            }
        }
        let gf = DVector::from_iterator(m, free.iter().map(|&i| g[i]));
        let step = match hess.clone().cholesky() {
            Some(ch) => -ch.solve(&gf),
            None => {
                let scale = hess.diagonal().iter().map(|d| d.abs()).fold(1.0, f64::max);
                -gf / scale
            }
        };
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let mut trial = x.clone();
            for (a, &i) in free.iter().enumerate() {
                trial[i] += t * step[a];
            }
            clamp(&mut trial);
            let ft = f(&trial);
            evals += 1;
            if ft.is_finite() && ft < fx {
                x = trial;
                fx = ft;
                improved = true;
                break;
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
    }
    Minimum {
        x,
        value: fx,
        evaluations: evals,
        converged: start.converged,
    }
}
