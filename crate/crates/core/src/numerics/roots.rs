use num_traits::Float;

use super::Scalar;
use crate::error::{Error, Result};

/// Scalar Newton–Raphson with bracketing safeguards.
///
/// Convergence is declared when `|f(x)| < tol`.
#[derive(Debug, Clone, Copy)]
pub struct NewtonSolver<T> {
    pub tol: T,
    pub max_iter: usize,
}

impl<T: Scalar> Default for NewtonSolver<T> {
    fn default() -> Self {
        Self {
            tol: T::lit(1e-10),
            max_iter: 100,
        }
    }
}

fn convergence_error<T: Scalar>(context: &str, iterations: usize, last: T, trace: Vec<f64>) -> Error {
    Error::Convergence {
        context: context.to_string(),
        iterations,
        last: last.to_f64_lossy(),
        trace,
    }
}

impl<T: Scalar> NewtonSolver<T> {
    pub fn new(tol: T, max_iter: usize) -> Result<Self> {
        if !(tol > T::zero()) {
            return Err(Error::invalid("Newton tolerance must be positive"));
        }
        Ok(Self { tol, max_iter })
    }

    /// Plain Newton iteration; `f` returns `(value, derivative)`.
    pub fn solve<F: FnMut(T) -> (T, T)>(&self, mut f: F, x0: T) -> Result<T> {
        let mut x = x0;
        let mut trace = Vec::new();
        for _ in 0..self.max_iter {
            let (fx, dfx) = f(x);
            trace.push(fx.to_f64_lossy());
            if Float::abs(fx) < self.tol {
                return Ok(x);
            }
            let next = x - fx / dfx;
            if !Float::is_finite(next) {
                break;
            }
            x = next;
        }
        Err(convergence_error("newton", self.max_iter, x, trace))
    }

    /// Newton steps safeguarded by bisection inside `[lo, hi]`, where `f(lo)` and
    /// `f(hi)` have opposite signs.
    pub fn solve_bracketed<F: FnMut(T) -> (T, T)>(&self, mut f: F, x0: T, lo: T, hi: T) -> Result<T> {
        let (mut lo, mut hi) = (Float::min(lo, hi), Float::max(lo, hi));
        let (f_lo, _) = f(lo);
        let (f_hi, _) = f(hi);
        if Float::abs(f_lo) < self.tol {
            return Ok(lo);
        }
        if Float::abs(f_hi) < self.tol {
            return Ok(hi);
        }
        if (f_lo < T::zero()) == (f_hi < T::zero()) {
            return Err(Error::invalid("bracket does not enclose a sign change"));
        }
        let lo_negative = f_lo < T::zero();
        let half = T::lit(0.5);
        let mut x = if x0 > lo && x0 < hi { x0 } else { half * (lo + hi) };
        let mut trace = Vec::new();
        for _ in 0..self.max_iter {
            let (fx, dfx) = f(x);
            trace.push(fx.to_f64_lossy());
            if Float::abs(fx) < self.tol {
                return Ok(x);
            }
            if (fx < T::zero()) == lo_negative {
                lo = x;
            } else {
                hi = x;
            }
            if hi - lo <= T::lit(4.0) * T::epsilon() * Float::max(T::one(), Float::abs(x)) {
                return Ok(x);
            }
            let newton = x - fx / dfx;
            x = if Float::is_finite(newton) && newton > lo && newton < hi {
                newton
            } else {
                half * (lo + hi)
            };
        }
        Err(convergence_error("bracketed newton", self.max_iter, x, trace))
    }

    /// Root of a strictly increasing function. Newton steps are kept inside the
    /// bracket learned from evaluated signs; the bracket is expanded geometrically
    /// from `x0` while only one side is known, then bisection is the fallback.
    pub fn solve_increasing<F: FnMut(T) -> (T, T)>(&self, mut f: F, x0: T) -> Result<T> {
        let mut lo: Option<T> = None;
        let mut hi: Option<T> = None;
        let mut x = x0;
        let mut step = T::one();
        let two = T::lit(2.0);
        let mut trace = Vec::new();
        for _ in 0..self.max_iter {
            let (fx, dfx) = f(x);
            trace.push(fx.to_f64_lossy());
            if !Float::is_finite(fx) {
                return Err(Error::Domain(format!(
                    "non-finite function value at x = {}",
                    x.to_f64_lossy()
                )));
            }
            if Float::abs(fx) < self.tol {
                return Ok(x);
            }
            if fx < T::zero() {
                lo = Some(x);
            } else {
                hi = Some(x);
            }
            let newton = if dfx > T::zero() { x - fx / dfx } else { T::nan() };
            x = match (lo, hi) {
                (Some(a), Some(b)) => {
                    if b - a <= T::lit(4.0) * T::epsilon() * Float::max(T::one(), Float::abs(x)) {
                        return Ok(x);
                    }
                    if Float::is_finite(newton) && newton > a && newton < b {
                        newton
                    } else {
                        T::lit(0.5) * (a + b)
                    }
                }
                (Some(a), None) => {
                    if Float::is_finite(newton) && newton > a && newton - a <= step {
                        newton
                    } else {
                        let next = a + step;
                        step = step * two;
                        next
                    }
                }
                (None, Some(b)) => {
                    if Float::is_finite(newton) && newton < b && b - newton <= step {
                        newton
                    } else {
                        let next = b - step;
                        step = step * two;
                        next
                    }
                }
                (None, None) => unreachable!("every iterate lands on one side"),
            };
        }
        Err(convergence_error("monotone newton", self.max_iter, x, trace))
    }
}

/// Newton–Raphson from `x0`; fails with the last iterate if `|f| < tol` is not reached.
pub fn newton_solve<T: Scalar, F: FnMut(T) -> (T, T)>(f: F, x0: T, tol: T, max_iter: usize) -> Result<T> {
    NewtonSolver::new(tol, max_iter)?.solve(f, x0)
}
