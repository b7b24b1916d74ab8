use crate::error::{Error, Result};
use crate::numerics::special::{expit, logit};
use crate::numerics::{NewtonSolver, NormalRule};

/// Solution of the logistic-normal convolution `E[expit(Δ + sZ)] = p` with the
/// moments needed for its derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaSolution {
    pub delta: f64,
    /// `E[expit'(Δ + sZ)]`.
    pub slope: f64,
    /// `E[expit'(Δ + sZ)·Z]`.
    pub slope_z: f64,
}

impl DeltaSolution {
    /// `∂Δ/∂η` for `p = expit(η)`.
    pub fn d_eta(&self, p: f64) -> f64 {
        p * (1.0 - p) / self.slope
    }

    /// `∂Δ/∂s` at fixed marginal probability.
    pub fn d_scale(&self) -> f64 {
        -self.slope_z / self.slope
    }
}

#[derive(Debug, Clone)]
pub struct DeltaSolver {
    rule: NormalRule,
    newton: NewtonSolver<f64>,
}

// logistic-normal approximation constant 16√3/(15π)
const PROBIT_SCALE: f64 = 0.588_155_964_094_826_2;

impl DeltaSolver {
    pub fn new(quadrature: usize) -> Result<Self> {
        Ok(Self { rule: NormalRule::new(quadrature)?, newton: NewtonSolver::new(1e-13, 200)? })
    }

    pub fn rule(&self) -> &NormalRule {
        &self.rule
    }

    /// `E[expit(Δ + sZ)]` and its derivative in Δ.
    pub fn marginal(&self, delta: f64, scale: f64) -> (f64, f64) {
        let (mut m, mut d) = (0.0, 0.0);
        for (&z, &w) in self.rule.z.iter().zip(&self.rule.w) {
            let p = expit(delta + scale * z);
            m += w * p;
            d += w * p * (1.0 - p);
        }
        (m, d)
    }

    /// Solve for Δ given marginal probability `p` and random-effect sd `scale`.
    pub fn solve(&self, p: f64, scale: f64) -> Result<DeltaSolution> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Domain(format!("marginal probability {p} outside (0, 1)")));
        }
        if !(scale >= 0.0) {
            return Err(Error::Domain(format!("random-effect scale {scale} must be non-negative")));
        }
        let eta = logit(p);
        if scale == 0.0 {
            return Ok(DeltaSolution { delta: eta, slope: p * (1.0 - p), slope_z: 0.0 });
        }
        if p == 0.5 {
            return Ok(self.moments(0.0, scale));
        }
        let start = eta * (1.0 + (PROBIT_SCALE * scale).powi(2)).sqrt();
        let delta = self.newton.solve_increasing(
            |d| {
                let (m, dm) = self.marginal(d, scale);
                (m - p, dm)
            },
            start,
        )?;
        Ok(self.moments(delta, scale))
    }

    fn moments(&self, delta: f64, scale: f64) -> DeltaSolution {
        let (mut slope, mut slope_z) = (0.0, 0.0);
        for (&z, &w) in self.rule.z.iter().zip(&self.rule.w) {
            let p = expit(delta + scale * z);
            slope += w * p * (1.0 - p);
            slope_z += w * p * (1.0 - p) * z;
        }
        DeltaSolution { delta, slope, slope_z }
    }
}

/// Δ solving `∫ expit(Δ + b) dN(b; 0, σ_jj) = p` with a 40-point rule.
pub fn solve_delta(marginal_p: f64, sigma_jj: f64) -> Result<f64> {
    if !(sigma_jj >= 0.0) {
        return Err(Error::Domain(format!("variance {sigma_jj} must be non-negative")));
    }
    Ok(DeltaSolver::new(40)?.solve(marginal_p, sigma_jj.sqrt())?.delta)
}
