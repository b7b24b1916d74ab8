use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_traits::Float;

use super::Scalar;
use crate::error::{Error, Result};

/// Square matrix known to be symmetric (stored exactly symmetrized).
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricMatrix<T: Scalar>(DMatrix<T>);

fn symmetry_tolerance<T: Scalar>() -> T {
    Float::max(T::lit(1e-12), T::lit(100.0) * T::epsilon())
}

impl<T: Scalar> SymmetricMatrix<T> {
    /// Validates symmetry within `1e-12` relative to the largest entry.
    pub fn new(m: DMatrix<T>) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(Error::shape(format!(
                "symmetric matrix must be square and non-empty, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let scale = Float::max(T::one(), m.iter().fold(T::zero(), |a, &v| Float::max(a, Float::abs(v))));
        let tol = symmetry_tolerance::<T>() * scale;
        for i in 0..m.nrows() {
            for j in 0..i {
                let (a, b) = (m[(i, j)], m[(j, i)]);
                if !(Float::abs(a - b) <= tol) {
                    return Err(Error::invalid(format!("matrix not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(Self::symmetrized(m))
    }

    fn symmetrized(m: DMatrix<T>) -> Self {
        let half = T::lit(0.5);
        let t = m.transpose();
        Self((m + t) * half)
    }

    pub fn identity(dim: usize) -> Self {
        Self(DMatrix::identity(dim, dim))
    }

    pub fn from_fn<F: FnMut(usize, usize) -> T>(dim: usize, mut f: F) -> Result<Self> {
        Self::new(DMatrix::from_fn(dim, dim, |i, j| f(i, j)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<T> {
        self.0
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.0[(i, j)]
    }

    /// Unit diagonal and off-diagonals in `[-1, 1]`.
    pub fn is_correlation(&self) -> bool {
        let tol = symmetry_tolerance::<T>();
        (0..self.dim()).all(|i| {
            Float::abs(self.0[(i, i)] - T::one()) <= tol
                && (0..self.dim()).all(|j| Float::abs(self.0[(i, j)]) <= T::one() + tol)
        })
    }

    pub fn eigen(&self) -> SymmetricEigen<T, nalgebra::Dyn> {
        SymmetricEigen::new(self.0.clone())
    }

    pub fn min_eigenvalue(&self) -> T {
        self.eigen()
            .eigenvalues
            .iter()
            .fold(T::infinity(), |a, &v| Float::min(a, v))
    }

    /// Rescale to unit diagonal (`D^{-1/2} M D^{-1/2}`).
    pub fn to_correlation(&self) -> Result<Self> {
        let d: Vec<T> = (0..self.dim()).map(|i| self.0[(i, i)]).collect();
        if d.iter().any(|&v| !(v > T::zero())) {
            return Err(Error::invalid("correlation rescaling needs a positive diagonal"));
        }
        let m = DMatrix::from_fn(self.dim(), self.dim(), |i, j| {
            if i == j {
                T::one()
            } else {
                self.0[(i, j)] / Float::sqrt(d[i] * d[j])
            }
        });
        Ok(Self::symmetrized(m))
    }
}

/// `A ⊗ B`; block `(i, j)` equals `A[i,j]·B`.
pub fn kronecker<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> Result<DMatrix<T>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::shape("kronecker factors must be non-empty"));
    }
    Ok(a.kronecker(b))
}

fn rebuild<T: Scalar>(vectors: &DMatrix<T>, values: &DVector<T>) -> DMatrix<T> {
    let scaled = DMatrix::from_fn(vectors.nrows(), vectors.ncols(), |i, j| vectors[(i, j)] * values[j]);
    let m = scaled * vectors.transpose();
    let t = m.transpose();
    (m + t) * T::lit(0.5)
}

/// Symmetric (principal) square root via eigendecomposition; eigenvalues in
/// `[-1e-6, 0)` are clipped to zero, anything more negative is rejected.
pub fn sym_sqrt<T: Scalar>(m: &SymmetricMatrix<T>) -> Result<DMatrix<T>> {
    let eig = m.eigen();
    let min = eig.eigenvalues.iter().fold(T::infinity(), |a, &v| Float::min(a, v));
    if min < T::lit(-1e-6) {
        return Err(Error::NotPsd {
            min_eigenvalue: min.to_f64_lossy(),
        });
    }
    let roots = eig.eigenvalues.map(|v| Float::sqrt(Float::max(v, T::zero())));
    Ok(rebuild(&eig.eigenvectors, &roots))
}

/// AR-1 correlation matrix: entry `(t, s) = gamma^|t-s|`.
pub fn ar1_matrix<T: Scalar>(gamma: T, dim: usize) -> Result<SymmetricMatrix<T>> {
    if !(Float::abs(gamma) < T::one()) {
        return Err(Error::invalid(format!(
            "AR-1 parameter must satisfy |gamma| < 1, got {}",
            gamma.to_f64_lossy()
        )));
    }
    if dim == 0 {
        return Err(Error::invalid("AR-1 dimension must be positive"));
    }
    Ok(SymmetricMatrix(DMatrix::from_fn(dim, dim, |i, j| {
        Float::powi(gamma, i.abs_diff(j) as i32)
    })))
}

#[derive(Debug, Clone)]
pub struct PsdProjection<T: Scalar> {
    pub matrix: SymmetricMatrix<T>,
    pub min_eigenvalue_before: T,
    /// Frobenius norm of the change.
    pub distance: T,
}

/// Nearest matrix (Frobenius) whose eigenvalues are at least `floor`.
pub fn psd_project<T: Scalar>(m: &SymmetricMatrix<T>, floor: T) -> PsdProjection<T> {
    let eig = m.eigen();
    let min = eig.eigenvalues.iter().fold(T::infinity(), |a, &v| Float::min(a, v));
    if min >= floor {
        return PsdProjection {
            matrix: m.clone(),
            min_eigenvalue_before: min,
            distance: T::zero(),
        };
    }
    let clipped = eig.eigenvalues.map(|v| Float::max(v, floor));
    let projected = rebuild(&eig.eigenvectors, &clipped);
    let distance = (&projected - m.matrix()).norm();
    PsdProjection {
        matrix: SymmetricMatrix(projected),
        min_eigenvalue_before: min,
        distance,
    }
}
