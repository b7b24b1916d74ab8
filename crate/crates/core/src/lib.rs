//! Forecasting engine for multivariate longitudinal binary outcomes.
//!
//! Model families: univariate and multivariate marginal models fitted by GEE
//! (`gee`), the marginalized multivariate random-effects model (`mmrem`) and
//! the first-order probit-normal marginalized transition random-effects model
//! (`pnmtrem`). Time-varying covariates are forecast with transition models
//! (`covforecast`) and forecasts are scored with `accuracy`. `simgen` produces
//! model-independent simulation data and `competition` runs the whole protocol.

pub mod accuracy;
pub mod competition;
pub mod covforecast;
pub mod dataset;
pub mod error;
pub mod gee;
pub mod mmrem;
pub mod numerics;
pub mod optim;
pub mod pnmtrem;
mod serde_nan;
pub mod simgen;

pub use error::{Error, Result};

/// Default scalar type of the concrete model layer.
pub type Real = f64;
pub type Matrix = nalgebra::DMatrix<Real>;
pub type Vector = nalgebra::DVector<Real>;
pub type GaussHermite = numerics::QuadratureRule<Real>;
pub type GaussHermite32 = numerics::QuadratureRule<f32>;
pub type CovMatrix = numerics::SymmetricMatrix<Real>;
pub type Newton = numerics::NewtonSolver<Real>;
