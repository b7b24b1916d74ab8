//! Numerical kernels shared by the model families: quadrature, root finding,
//! symmetric matrix utilities, multivariate normal sampling and link functions.
//!
//! Most kernels are generic over [`Scalar`] so they can run in `f32` or `f64`.

mod linalg;
mod link;
mod mvn;
mod quadrature;
mod roots;
mod scalar;
pub mod special;

pub use linalg::{ar1_matrix, kronecker, psd_project, sym_sqrt, PsdProjection, SymmetricMatrix};
pub use link::Link;
pub use mvn::{mvn_sample, MvnSampler};
pub use quadrature::{NormalRule, QuadratureRule};
pub use roots::{newton_solve, NewtonSolver};
pub use scalar::Scalar;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// RNG used everywhere a seed is accepted.
pub type SeededRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent child seed (SplitMix64 finalizer over master and stream index).
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(stream.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
