use crate::error::{Error, Result};
use crate::numerics::special::{norm_cdf, norm_pdf, norm_quantile};
use crate::numerics::NewtonSolver;

fn check_probability(p: f64, what: &str) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("{what} probability {p} outside (0, 1)")));
    }
    Ok(())
}

/// Intercept of the transition layer with its implicit derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionDelta {
    pub delta: f64,
    /// `∂Δ/∂p_t`.
    pub d_p: f64,
    /// `∂Δ/∂p_prev`.
    pub d_p_prev: f64,
    /// `∂Δ/∂(α·Z)`.
    pub d_w: f64,
}

/// Solve `p_prev·Φ(Δ + w) + (1 − p_prev)·Φ(Δ) = p_t` for Δ.
pub fn solve_delta_t(p_t: f64, p_prev: f64, alpha_z: f64) -> Result<f64> {
    Ok(transition_delta(p_t, p_prev, alpha_z)?.delta)
}

pub fn transition_delta(p_t: f64, p_prev: f64, w: f64) -> Result<TransitionDelta> {
    check_probability(p_t, "marginal")?;
    if !(0.0..=1.0).contains(&p_prev) {
        return Err(Error::Domain(format!("lagged marginal probability {p_prev} outside [0, 1]")));
    }
    if !w.is_finite() {
        return Err(Error::Domain(format!("transition term {w} is not finite")));
    }
    let q = norm_quantile(p_t);
    let delta = if w == 0.0 || p_prev == 0.0 {
        q
    } else if p_prev == 1.0 {
        q - w
    } else {
        NewtonSolver::new(1e-14, 200)?.solve_increasing(
            |d| {
                let f = p_prev * norm_cdf(d + w) + (1.0 - p_prev) * norm_cdf(d) - p_t;
                (f, p_prev * norm_pdf(d + w) + (1.0 - p_prev) * norm_pdf(d))
            },
            q - p_prev * w,
        )?
    };
    let dens = p_prev * norm_pdf(delta + w) + (1.0 - p_prev) * norm_pdf(delta);
    if !(dens > 0.0) {
        return Err(Error::Domain(format!("flat marginal constraint at Δ = {delta}")));
    }
    Ok(TransitionDelta {
        delta,
        d_p: 1.0 / dens,
        d_p_prev: -(norm_cdf(delta + w) - norm_cdf(delta)) / dens,
        d_w: -p_prev * norm_pdf(delta + w) / dens,
    })
}

/// `Δ* = Φ⁻¹(p_cond)·√(1 + λ²σ²)`, the probit-normal convolution in closed form.
pub fn solve_delta_star(p_cond: f64, lambda: f64, sigma: f64) -> Result<f64> {
    check_probability(p_cond, "conditional")?;
    if !(sigma >= 0.0) {
        return Err(Error::Domain(format!("random-effect sd {sigma} must be non-negative")));
    }
    Ok(norm_quantile(p_cond) * (1.0 + lambda * lambda * sigma * sigma).sqrt())
}
