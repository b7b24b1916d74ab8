use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::Scalar;
use crate::error::{Error, Result};

/// Gauss–Hermite rule for `∫ f(x) e^{-x²} dx` (physicists' weight).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRule<T> {
    nodes: Vec<T>,
    weights: Vec<T>,
}

pub const MAX_GAUSS_HERMITE_POINTS: usize = 128;

impl<T: Scalar> QuadratureRule<T> {
    /// `n`-point Gauss–Hermite rule, `1 <= n <= 128`.
    ///
    /// Nodes start from the Golub–Welsch eigenvalues of the Jacobi matrix and
    /// are polished by Newton steps on the orthonormal Hermite recurrence;
    /// weights come from the Christoffel function. All work is done in `f64`.
    pub fn gauss_hermite(n: usize) -> Result<Self> {
        if n == 0 || n > MAX_GAUSS_HERMITE_POINTS {
            return Err(Error::invalid(format!(
                "Gauss-Hermite order must be in 1..={MAX_GAUSS_HERMITE_POINTS}, got {n}"
            )));
        }
        let (nodes, weights) = gauss_hermite_f64(n);
        Ok(Self {
            nodes: nodes.into_iter().map(T::lit).collect(),
            weights: weights.into_iter().map(T::lit).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[T] {
        &self.nodes
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    /// Approximates `∫ f(x) e^{-x²} dx`.
    pub fn integrate<F: FnMut(T) -> T>(&self, mut f: F) -> T {
        self.nodes
            .iter()
            .zip(&self.weights)
            .fold(T::zero(), |acc, (&x, &w)| acc + w * f(x))
    }
}

/// Polynomials `p_0..p_{n}` orthonormal w.r.t. `e^{-x²}` evaluated at `x`; returns (p_{n-1}, p_n, Σ_{k<n} p_k²).
fn hermite_orthonormal(n: usize, x: f64) -> (f64, f64, f64) {
    let mut prev = 0.0;
    let mut cur = PI.powf(-0.25);
    let mut sum_sq = 0.0;
    for k in 0..n {
        sum_sq += cur * cur;
        let kf = k as f64;
        let next = x * (2.0 / (kf + 1.0)).sqrt() * cur - (kf / (kf + 1.0)).sqrt() * prev;
        prev = cur;
        cur = next;
    }
    (prev, cur, sum_sq)
}

fn gauss_hermite_f64(n: usize) -> (Vec<f64>, Vec<f64>) {
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64 / 2.0).sqrt()
        } else {
            0.0
        }
    });
    let mut nodes: Vec<f64> = SymmetricEigen::new(jacobi).eigenvalues.iter().copied().collect();
    nodes.sort_by(|a, b| a.total_cmp(b));

    let nf = n as f64;
    for x in nodes.iter_mut() {
        for _ in 0..10 {
            let (p_prev, p_n, _) = hermite_orthonormal(n, *x);
            // p_n' = sqrt(2n) p_{n-1}
            let step = p_n / ((2.0 * nf).sqrt() * p_prev);
            *x -= step;
            if step.abs() <= 1e-15 * x.abs().max(1.0) {
                break;
            }
        }
    }
    // exact symmetry about zero
    for i in 0..n / 2 {
        let m = 0.5 * (nodes[n - 1 - i] - nodes[i]);
        nodes[i] = -m;
        nodes[n - 1 - i] = m;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    let weights = nodes
        .iter()
        .map(|&x| 1.0 / hermite_orthonormal(n, x).2)
        .collect();
    (nodes, weights)
}

/// Gauss–Hermite rule rescaled to expectations under `N(0, 1)`:
/// `E f(Z) ≈ Σ_q w_q f(z_q)` with `Σ w_q = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalRule {
    pub z: Vec<f64>,
    pub w: Vec<f64>,
}

impl NormalRule {
    pub fn new(n: usize) -> Result<Self> {
        let rule = QuadratureRule::<f64>::gauss_hermite(n)?;
        let scale = PI.sqrt().recip();
        Ok(Self {
            z: rule.nodes.iter().map(|x| x * std::f64::consts::SQRT_2).collect(),
            w: rule.weights.iter().map(|w| w * scale).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn expect<F: FnMut(f64) -> f64>(&self, mut f: F) -> f64 {
        self.z.iter().zip(&self.w).map(|(&z, &w)| w * f(z)).sum()
    }
}
