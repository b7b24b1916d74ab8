use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{row_sums, MmremFit};
use crate::dataset::{design_matrix, Design, LongitudinalDataset};
use crate::error::{Error, Result};
use crate::numerics::special::expit;
use crate::numerics::{ar1_matrix, derive_seed, rng_from_seed, sym_sqrt, SymmetricMatrix};

use super::DeltaSolver;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MmremVariant {
    /// Empirical-Bayes score, loadings from all `T + m` columns.
    #[serde(rename = "MMREM1")]
    Mmrem1,
    /// Empirical-Bayes score, loadings from the forecast columns only.
    #[serde(rename = "MMREM2")]
    Mmrem2,
    /// Median over simulated scores.
    #[serde(rename = "MMREM3")]
    Mmrem3,
    /// Score fixed at zero.
    #[serde(rename = "MMREM4")]
    Mmrem4,
}

impl MmremVariant {
    pub const ALL: [MmremVariant; 4] = [Self::Mmrem1, Self::Mmrem2, Self::Mmrem3, Self::Mmrem4];

    pub fn label(self) -> &'static str {
        match self {
            Self::Mmrem1 => "MMREM1",
            Self::Mmrem2 => "MMREM2",
            Self::Mmrem3 => "MMREM3",
            Self::Mmrem4 => "MMREM4",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MmremForecastConfig {
    /// Number of simulated scores per subject for MMREM3.
    pub draws: usize,
    pub seed: u64,
}

impl Default for MmremForecastConfig {
    fn default() -> Self {
        Self { draws: 150, seed: 0 }
    }
}

/// Which columns of `Σ₁^{1/2}` enter the forecast loadings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnRetention {
    All,
    ForecastOnly,
}

/// Forecast loadings `a[h * k + j]` for occasions `T+1..T+m`.
pub fn loading(fit: &MmremFit, m: usize, retention: ColumnRetention) -> Result<Vec<f64>> {
    let t = fit.n_times;
    let k = fit.sigma2.nrows();
    let s1 = sym_sqrt(&ar1_matrix(fit.gamma, t + m)?)?;
    let s2 = sym_sqrt(&SymmetricMatrix::new(fit.sigma2.clone())?)?;
    let cols = match retention {
        ColumnRetention::All => 0..t + m,
        ColumnRetention::ForecastOnly => t..t + m,
    };
    let r1 = row_sums(&s1, cols);
    let r2 = row_sums(&s2, 0..k);
    Ok(r1[t..].iter().flat_map(|a| r2.iter().map(move |b| a * b)).collect())
}

fn subject_scores(fit: &MmremFit, ds: &LongitudinalDataset) -> Result<Vec<f64>> {
    ds.subjects()
        .iter()
        .map(|s| match fit.subjects.iter().position(|f| f == s) {
            Some(i) => Ok(fit.z_hat[i]),
            None => Err(Error::invalid(format!("subject {s} was not in the fitted data"))),
        })
        .collect()
}

fn check_design(fit: &MmremFit, design: &Design) -> Result<()> {
    if design.names != fit.names {
        return Err(Error::shape(format!(
            "design columns {:?} do not match fitted columns {:?}",
            design.names, fit.names
        )));
    }
    Ok(())
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Conditional probabilities for every design row given loadings over the
/// design's occasions.
fn predict(
    fit: &MmremFit,
    ds: &LongitudinalDataset,
    design: &Design,
    loadings: &[f64],
    variant: MmremVariant,
    cfg: &MmremForecastConfig,
) -> Result<Vec<f64>> {
    check_design(fit, design)?;
    if variant == MmremVariant::Mmrem3 && cfg.draws == 0 {
        return Err(Error::invalid("MMREM3 needs at least one draw"));
    }
    let k = design.n_responses();
    let solver = DeltaSolver::new(fit.quadrature)?;
    let scale: Vec<f64> = (0..k).map(|j| fit.sigma2[(j, j)].max(0.0).sqrt()).collect();
    let eta = design.linear_predictor(&fit.coefficients)?;
    let z_hat = match variant {
        MmremVariant::Mmrem1 | MmremVariant::Mmrem2 => subject_scores(fit, ds)?,
        _ => vec![0.0; design.n_subjects],
    };
    let mut out = vec![f64::NAN; design.y.len()];
    let mut draws = vec![0.0; cfg.draws];
    let mut probs = vec![0.0; cfg.draws];
    for i in 0..design.n_subjects {
        if variant == MmremVariant::Mmrem3 {
            let mut rng = rng_from_seed(derive_seed(cfg.seed, i as u64));
            for d in draws.iter_mut() {
                *d = rng.sample(StandardNormal);
            }
        }
        for t in 0..design.n_times {
            for j in 0..k {
                let row = design.row(i, t, j);
                if !eta[row].is_finite() {
                    continue;
                }
                let delta = solver.solve(expit(eta[row]), scale[j])?.delta;
                let a = loadings[t * k + j];
                out[row] = if variant == MmremVariant::Mmrem3 {
                    for (p, z) in probs.iter_mut().zip(&draws) {
                        *p = expit(delta + a * z);
                    }
                    median(&mut probs)
                } else {
                    expit(delta + a * z_hat[i])
                };
            }
        }
    }
    Ok(out)
}

/// In-sample conditional probabilities on the training occasions. All variants
/// share the fitted `T × T` loadings here.
pub fn fitted_mmrem(
    fit: &MmremFit,
    train: &LongitudinalDataset,
    variant: MmremVariant,
    cfg: &MmremForecastConfig,
) -> Result<(Design, Vec<f64>)> {
    if train.n_times() != fit.n_times {
        return Err(Error::shape(format!("{} occasions, fit used {}", train.n_times(), fit.n_times)));
    }
    let design = design_matrix(train, &fit.formula)?;
    let st = super::structure(fit.gamma, &fit.sigma2, fit.n_times)?;
    let p = predict(fit, train, &design, &st.loading, variant, cfg)?;
    Ok((design, p))
}

/// Conditional forecasts for the occasions of `horizon`, which follow the
/// training window directly.
pub fn forecast_mmrem(
    fit: &MmremFit,
    horizon: &LongitudinalDataset,
    variant: MmremVariant,
    cfg: &MmremForecastConfig,
) -> Result<(Design, Vec<f64>)> {
    let design = design_matrix(horizon, &fit.formula)?;
    let retention = match variant {
        MmremVariant::Mmrem2 => ColumnRetention::ForecastOnly,
        _ => ColumnRetention::All,
    };
    let a = loading(fit, horizon.n_times(), retention)?;
    let p = predict(fit, horizon, &design, &a, variant, cfg)?;
    Ok((design, p))
}
