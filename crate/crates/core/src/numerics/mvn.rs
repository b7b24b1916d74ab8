use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{rng_from_seed, sym_sqrt, Scalar, SymmetricMatrix};
use crate::error::{Error, Result};

/// Multivariate normal sampler using the symmetric square root of the covariance,
/// so singular (PSD) covariances are accepted.
#[derive(Debug, Clone)]
pub struct MvnSampler<T: Scalar> {
    mean: DVector<T>,
    root: DMatrix<T>,
}

impl<T: Scalar> MvnSampler<T>
where
    StandardNormal: Distribution<T>,
{
    pub fn new(mean: DVector<T>, cov: &SymmetricMatrix<T>) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(Error::shape(format!(
                "mean has length {} but covariance is {}x{}",
                mean.len(),
                cov.dim(),
                cov.dim()
            )));
        }
        Ok(Self {
            mean,
            root: sym_sqrt(cov)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<T> {
        let z = DVector::from_fn(self.dim(), |_, _| StandardNormal.sample(rng));
        &self.mean + &self.root * z
    }
}

/// `n` deterministic draws from `N(mean, cov)` under `seed`.
pub fn mvn_sample<T: Scalar>(mean: &DVector<T>, cov: &SymmetricMatrix<T>, n: usize, seed: u64) -> Result<Vec<DVector<T>>>
where
    StandardNormal: Distribution<T>,
{
    let sampler = MvnSampler::new(mean.clone(), cov)?;
    let mut rng = rng_from_seed(seed);
    Ok((0..n).map(|_| sampler.sample(&mut rng)).collect())
}
