//! Quasi-Newton minimization and finite-difference helpers for the
//! likelihood-based fits.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Objective evaluation: `None` marks an infeasible point (treated as `+inf`).
pub type Evaluation = Option<(f64, Vec<f64>)>;

#[derive(Debug, Clone, Copy)]
pub struct Bfgs {
    pub max_iter: usize,
    /// Stop when `max_i |g_i|·max(|x_i|, 1) / max(|f|, 1)` falls below this.
    pub grad_tol: f64,
    /// Largest allowed change of any coordinate in one line-search trial.
    pub max_step: f64,
}

impl Default for Bfgs {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-8,
            max_step: 2.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// Objective value after each accepted step.
    pub trace: Vec<f64>,
}

fn relative_gradient(x: &[f64], g: &[f64], f: f64) -> f64 {
    let scale = f.abs().max(1.0);
    x.iter()
        .zip(g)
        .map(|(xi, gi)| gi.abs() * xi.abs().max(1.0) / scale)
        .fold(0.0, f64::max)
}

impl Bfgs {
    pub fn minimize<F>(&self, mut f: F, x0: Vec<f64>) -> Result<Minimum>
    where
        F: FnMut(&[f64]) -> Evaluation,
    {
        let n = x0.len();
        let mut evaluations = 1;
        let (mut fx, g0) = f(&x0).ok_or_else(|| Error::Estimation("objective infeasible at the starting point".into()))?;
        if !fx.is_finite() {
            return Err(Error::Estimation("objective not finite at the starting point".into()));
        }
        let mut x = DVector::from_vec(x0);
        let mut g = DVector::from_vec(g0);
        let mut h = DMatrix::<f64>::identity(n, n);
        let mut h_is_identity = true;
        let mut trace = vec![fx];
        let mut converged = relative_gradient(x.as_slice(), g.as_slice(), fx) < self.grad_tol;
        let mut iterations = 0;
        let mut stalls = 0;

        while !converged && iterations < self.max_iter {
            iterations += 1;
            let mut d = -(&h * &g);
            let mut slope = d.dot(&g);
            if !(slope < 0.0) {
                h = DMatrix::identity(n, n);
                h_is_identity = true;
                d = -g.clone();
                slope = d.dot(&g);
            }
            let biggest = d.amax();
            if biggest > self.max_step {
                d *= self.max_step / biggest;
                slope = d.dot(&g);
            }

            let mut alpha = 1.0;
            let mut accepted: Option<(DVector<f64>, f64, DVector<f64>)> = None;
            for _ in 0..40 {
                let trial = &x + &d * alpha;
                evaluations += 1;
                match f(trial.as_slice()) {
                    Some((ft, gt)) if ft.is_finite() && ft <= fx + 1e-4 * alpha * slope => {
                        accepted = Some((trial, ft, DVector::from_vec(gt)));
                        break;
                    }
                    Some((ft, _)) if ft.is_finite() => {
                        // quadratic interpolation, kept within [0.1, 0.5] of the current step
                        let denom = 2.0 * (ft - fx - slope * alpha);
                        let a = if denom > 0.0 { -slope * alpha * alpha / denom } else { 0.5 * alpha };
                        alpha = a.clamp(0.1 * alpha, 0.5 * alpha);
                    }
                    _ => alpha *= 0.25,
                }
            }

            let Some((x_new, f_new, g_new)) = accepted else {
                if h_is_identity {
                    break;
                }
                h = DMatrix::identity(n, n);
                h_is_identity = true;
                continue;
            };

            let s = &x_new - &x;
            let y = &g_new - &g;
            let sy = s.dot(&y);
            if sy > 1e-10 * s.norm() * y.norm() {
                if h_is_identity {
                    h *= sy / y.dot(&y);
                }
                let rho = 1.0 / sy;
                let hy = &h * &y;
                let yhy = y.dot(&hy);
                // H ← H − ρ(s·hyᵀ + hy·sᵀ) + (ρ²·yᵀHy + ρ) s·sᵀ
                h -= (&s * hy.transpose() + &hy * s.transpose()) * rho;
                h += (&s * s.transpose()) * (rho * rho * yhy + rho);
                h_is_identity = false;
            }

            let rel_change = (fx - f_new).abs() / fx.abs().max(1.0);
            x = x_new;
            g = g_new;
            fx = f_new;
            trace.push(fx);
            converged = relative_gradient(x.as_slice(), g.as_slice(), fx) < self.grad_tol;
            if rel_change < 1e-15 {
                stalls += 1;
                if stalls >= 3 {
                    break;
                }
            } else {
                stalls = 0;
            }
        }
        if !converged {
            // stalled at a point where the gradient is numerically flat
            converged = relative_gradient(x.as_slice(), g.as_slice(), fx) < 1e-5;
        }
        Ok(Minimum {
            x: x.as_slice().to_vec(),
            value: fx,
            gradient: g.as_slice().to_vec(),
            iterations,
            evaluations,
            converged,
            trace,
        })
    }
}

fn fd_step(x: f64, rel: f64) -> f64 {
    rel * x.abs().max(1.0)
}

/// Central finite-difference gradient.
pub fn fd_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], rel_step: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = fd_step(x[i], rel_step);
            xp[i] = x[i] + h;
            let up = f(&xp);
            xp[i] = x[i] - h;
            let down = f(&xp);
            xp[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Symmetrized Hessian by central differences of an analytic gradient.
pub fn hessian_from_gradient<G>(mut grad: G, x: &[f64], rel_step: f64) -> Result<DMatrix<f64>>
where
    G: FnMut(&[f64]) -> Option<Vec<f64>>,
{
    let n = x.len();
    let mut hess = DMatrix::zeros(n, n);
    let mut xp = x.to_vec();
    for j in 0..n {
        let h = fd_step(x[j], rel_step);
        xp[j] = x[j] + h;
        let up = grad(&xp).ok_or_else(|| Error::Estimation("gradient infeasible near optimum".into()))?;
        xp[j] = x[j] - h;
        let down = grad(&xp).ok_or_else(|| Error::Estimation("gradient infeasible near optimum".into()))?;
        xp[j] = x[j];
        for i in 0..n {
            hess[(i, j)] = (up[i] - down[i]) / (2.0 * h);
        }
    }
    let t = hess.transpose();
    Ok((hess + t) * 0.5)
}

/// Inverse of a symmetric Hessian via its spectrum; directions with
/// non-positive curvature get infinite variance.
pub fn covariance_from_hessian(hess: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(hess.clone());
    let top = eig.eigenvalues.amax().max(1e-300);
    let n = hess.nrows();
    let mut cov = DMatrix::zeros(n, n);
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        let v = eig.eigenvectors.column(k);
        if lambda <= 1e-12 * top {
            for i in 0..n {
                if v[i].abs() > 1e-8 {
                    cov[(i, i)] = f64::INFINITY;
                }
            }
            continue;
        }
        cov += (v * v.transpose()) / lambda;
    }
    cov
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> Evaluation {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        Some((f, g))
    }

    #[test]
    fn minimizes_rosenbrock() {
        let opt = Bfgs::default().minimize(rosenbrock, vec![-1.2, 1.0]).unwrap();
        assert!(opt.converged);
        assert!((opt.x[0] - 1.0).abs() < 1e-5 && (opt.x[1] - 1.0).abs() < 1e-5, "{:?}", opt.x);
    }

    #[test]
    fn respects_infeasible_region() {
        // log barrier: infeasible for x <= 0, minimum at x = 1
        let f = |x: &[f64]| {
            if x[0] <= 0.0 {
                None
            } else {
                Some((x[0] - x[0].ln(), vec![1.0 - 1.0 / x[0]]))
            }
        };
        let opt = Bfgs::default().minimize(f, vec![5.0]).unwrap();
        assert!((opt.x[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn fd_and_hessian_helpers() {
        let f = |x: &[f64]| x[0] * x[0] * 3.0 + x[0] * x[1] + x[1].powi(2);
        let g = fd_gradient(f, &[1.0, 2.0], 1e-6);
        assert!((g[0] - 8.0).abs() < 1e-6 && (g[1] - 5.0).abs() < 1e-6);
        let grad = |x: &[f64]| Some(vec![6.0 * x[0] + x[1], x[0] + 2.0 * x[1]]);
        let h = hessian_from_gradient(grad, &[0.3, -0.2], 1e-5).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[6.0, 1.0, 1.0, 2.0]);
        assert!((&h - &expect).norm() < 1e-8);
        let cov = covariance_from_hessian(&h);
        assert!((cov * expect - DMatrix::identity(2, 2)).norm() < 1e-8);
    }

    #[test]
    fn singular_hessian_gives_infinite_variance() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let cov = covariance_from_hessian(&h);
        assert!((cov[(0, 0)] - 1.0).abs() < 1e-12);
        assert!(cov[(1, 1)].is_infinite());
    }
}
