use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrKind {
    Independence,
    Exchangeable,
    Ar1,
    Unstructured,
}

/// Estimated working correlation of a cluster laid out as `T` occasions × `k` responses
/// (response index fastest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WorkingCorrelation {
    Independence,
    Exchangeable { rho: f64 },
    /// Lag-1 correlation within a response; responses uncorrelated (AR-1 ⊗ I_k).
    Ar1 { rho: f64 },
    Unstructured { matrix: DMatrix<f64> },
}

impl WorkingCorrelation {
    pub fn kind(&self) -> CorrKind {
        match self {
            WorkingCorrelation::Independence => CorrKind::Independence,
            WorkingCorrelation::Exchangeable { .. } => CorrKind::Exchangeable,
            WorkingCorrelation::Ar1 { .. } => CorrKind::Ar1,
            WorkingCorrelation::Unstructured { .. } => CorrKind::Unstructured,
        }
    }

    pub fn initial(kind: CorrKind, dim: usize) -> Self {
        match kind {
            CorrKind::Independence => WorkingCorrelation::Independence,
            CorrKind::Exchangeable => WorkingCorrelation::Exchangeable { rho: 0.0 },
            CorrKind::Ar1 => WorkingCorrelation::Ar1 { rho: 0.0 },
            CorrKind::Unstructured => WorkingCorrelation::Unstructured { matrix: DMatrix::identity(dim, dim) },
        }
    }

    /// Full cluster correlation matrix for `t` occasions × `k` responses.
    pub fn matrix(&self, t: usize, k: usize) -> DMatrix<f64> {
        let dim = t * k;
        match self {
            WorkingCorrelation::Independence => DMatrix::identity(dim, dim),
            WorkingCorrelation::Exchangeable { rho } => {
                DMatrix::from_fn(dim, dim, |a, b| if a == b { 1.0 } else { *rho })
            }
            WorkingCorrelation::Ar1 { rho } => DMatrix::from_fn(dim, dim, |a, b| {
                if a % k != b % k {
                    0.0
                } else {
                    rho.powi((a / k).abs_diff(b / k) as i32)
                }
            }),
            WorkingCorrelation::Unstructured { matrix } => matrix.clone(),
        }
    }
}

/// Pearson residuals of one cluster in cluster layout; `None` for unused cells.
pub type ClusterResiduals = Vec<Option<f64>>;

/// Moment estimate of the working correlation from Pearson residuals, with the
/// dispersion estimated as the mean squared residual.
pub fn estimate_working_corr(
    residuals: &[ClusterResiduals],
    kind: CorrKind,
    t: usize,
    k: usize,
) -> Result<WorkingCorrelation> {
    if residuals.len() < 2 {
        return Err(Error::Estimation("working correlation needs at least two clusters".into()));
    }
    let dim = t * k;
    if residuals.iter().any(|r| r.len() != dim) {
        return Err(Error::shape(format!("cluster residuals must have length {dim}")));
    }
    let (mut ss, mut count) = (0.0, 0usize);
    for r in residuals.iter().flatten().flatten() {
        ss += r * r;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Estimation("no residuals".into()));
    }
    let phi = ss / count as f64;
    if !(phi > 0.0) {
        return Err(Error::Estimation("zero residual dispersion".into()));
    }
    let pair_mean = |select: &dyn Fn(usize, usize) -> bool| {
        let (mut sum, mut n) = (0.0, 0usize);
        for r in residuals {
            for a in 0..dim {
                for b in a + 1..dim {
                    if select(a, b) {
                        if let (Some(x), Some(y)) = (r[a], r[b]) {
                            sum += x * y;
                            n += 1;
                        }
                    }
                }
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / (n as f64 * phi)
        }
    };
    Ok(match kind {
        CorrKind::Independence => WorkingCorrelation::Independence,
        CorrKind::Exchangeable => {
            let lower = if dim > 1 { -1.0 / (dim as f64 - 1.0) } else { -1.0 };
            let rho = pair_mean(&|_, _| true).clamp(lower + 1e-6, 1.0 - 1e-6);
            WorkingCorrelation::Exchangeable { rho }
        }
        CorrKind::Ar1 => {
            let rho = pair_mean(&|a, b| a % k == b % k && b / k == a / k + 1).clamp(-1.0 + 1e-6, 1.0 - 1e-6);
            WorkingCorrelation::Ar1 { rho }
        }
        CorrKind::Unstructured => {
            let mut m = DMatrix::<f64>::zeros(dim, dim);
            let mut n = DMatrix::<f64>::zeros(dim, dim);
            for r in residuals {
                for a in 0..dim {
                    for b in a..dim {
                        if let (Some(x), Some(y)) = (r[a], r[b]) {
                            m[(a, b)] += x * y;
                            n[(a, b)] += 1.0;
                        }
                    }
                }
            }
            for a in 0..dim {
                for b in a..dim {
                    let v = if n[(a, b)] > 0.0 { m[(a, b)] / n[(a, b)] } else if a == b { 1.0 } else { 0.0 };
                    m[(a, b)] = v;
                    m[(b, a)] = v;
                }
            }
            WorkingCorrelation::Unstructured { matrix: clip_to_correlation(&unit_diagonal(&m), 1e-8) }
        }
    })
}

fn unit_diagonal(m: &DMatrix<f64>) -> DMatrix<f64> {
    let d: Vec<f64> = (0..m.nrows()).map(|a| m[(a, a)].max(1e-300).sqrt()).collect();
    DMatrix::from_fn(m.nrows(), m.ncols(), |a, b| if a == b { 1.0 } else { m[(a, b)] / (d[a] * d[b]) })
}

/// Eigenvalue clipping at `floor`, then rescaling back to unit diagonal.
fn clip_to_correlation(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    if eig.eigenvalues.min() >= floor {
        return m.clone();
    }
    let clipped = eig.eigenvalues.map(|v| v.max(floor));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    let sym = (&rebuilt + rebuilt.transpose()) * 0.5;
    unit_diagonal(&sym)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn independent_noise_gives_small_rho() {
        let mut rng = crate::numerics::rng_from_seed(8);
        let res: Vec<ClusterResiduals> = (0..1000)
            .map(|_| (0..4).map(|_| Some(rng.sample::<f64, _>(StandardNormal))).collect())
            .collect();
        match estimate_working_corr(&res, CorrKind::Exchangeable, 4, 1).unwrap() {
            WorkingCorrelation::Exchangeable { rho } => assert!(rho.abs() < 0.05, "{rho}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn identical_pairs_push_rho_to_one() {
        let res: Vec<ClusterResiduals> = (0..50).map(|i| vec![Some(i as f64 - 25.0); 2]).collect();
        match estimate_working_corr(&res, CorrKind::Exchangeable, 2, 1).unwrap() {
            WorkingCorrelation::Exchangeable { rho } => assert!(rho > 1.0 - 1e-5 && rho < 1.0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unstructured_shape_contract() {
        let mut rng = crate::numerics::rng_from_seed(2);
        let res: Vec<ClusterResiduals> = (0..6)
            .map(|_| (0..8).map(|_| Some(rng.sample::<f64, _>(StandardNormal))).collect())
            .collect();
        // fewer clusters than dimensions: raw moment matrix is singular
        let WorkingCorrelation::Unstructured { matrix } = estimate_working_corr(&res, CorrKind::Unstructured, 4, 2).unwrap() else {
            panic!()
        };
        assert_eq!(matrix.shape(), (8, 8));
        for a in 0..8 {
            assert!((matrix[(a, a)] - 1.0).abs() < 1e-12);
        }
        assert!(SymmetricEigen::new(matrix).eigenvalues.min() > 0.0);
    }

    #[test]
    fn ar1_uses_within_response_lags() {
        let r = WorkingCorrelation::Ar1 { rho: 0.5 }.matrix(3, 2);
        assert_eq!(r[(0, 2)], 0.5);
        assert_eq!(r[(0, 4)], 0.25);
        assert_eq!(r[(0, 1)], 0.0);
        // residual pattern: response 0 persistent, response 1 alternating
        let res: Vec<ClusterResiduals> = (0..40)
            .map(|i| {
                let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                vec![Some(s), Some(s), Some(s), Some(-s), Some(s), Some(s)]
            })
            .collect();
        let WorkingCorrelation::Ar1 { rho } = estimate_working_corr(&res, CorrKind::Ar1, 3, 2).unwrap() else { panic!() };
        assert!(rho.abs() < 1e-12);
    }

    #[test]
    fn too_few_clusters() {
        assert!(matches!(estimate_working_corr(&[vec![Some(1.0)]], CorrKind::Exchangeable, 1, 1), Err(Error::Estimation(_))));
    }
}
