use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{marginal, transition_delta, PnmtremFit, SmoothMethod};
use crate::dataset::{design_matrix, Design, LongitudinalDataset};
use crate::error::{Error, Result};
use crate::numerics::special::norm_cdf;
use crate::numerics::{derive_seed, rng_from_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZSource {
    EmpiricalBayes,
    Zero,
}

/// How the lagged response is supplied from the second forecast occasion on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryMode {
    /// `Ŷ = 1` iff the previous forecast is at least 0.5.
    CutoffHalf,
    /// Use the held-out responses (evaluation only).
    Observed,
    /// Cut at the training prevalence of the response.
    EmpiricalCutoff,
    /// Draw `Ŷ ~ Bernoulli(p̂)`.
    BernoulliSim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PnmtremVariant {
    pub z_source: ZSource,
    pub history: HistoryMode,
}

impl PnmtremVariant {
    pub const fn new(z_source: ZSource, history: HistoryMode) -> Self {
        Self { z_source, history }
    }

    pub const ALL: [PnmtremVariant; 8] = [
        Self::new(ZSource::EmpiricalBayes, HistoryMode::CutoffHalf),
        Self::new(ZSource::Zero, HistoryMode::CutoffHalf),
        Self::new(ZSource::EmpiricalBayes, HistoryMode::Observed),
        Self::new(ZSource::Zero, HistoryMode::Observed),
        Self::new(ZSource::EmpiricalBayes, HistoryMode::EmpiricalCutoff),
        Self::new(ZSource::Zero, HistoryMode::EmpiricalCutoff),
        Self::new(ZSource::EmpiricalBayes, HistoryMode::BernoulliSim),
        Self::new(ZSource::Zero, HistoryMode::BernoulliSim),
    ];

    pub fn label(self) -> String {
        match (self.z_source, self.history) {
            (ZSource::EmpiricalBayes, HistoryMode::CutoffHalf) => "PNMTREM1".into(),
            (ZSource::Zero, HistoryMode::CutoffHalf) => "PNMTREM2".into(),
            (z, h) => {
                let z = if z == ZSource::Zero { "zero" } else { "eb" };
                let h = match h {
                    HistoryMode::Observed => "observed",
                    HistoryMode::EmpiricalCutoff => "empirical",
                    _ => "bernoulli",
                };
                format!("PNMTREM[{z},{h}]")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PnmtremForecastConfig {
    pub variant: PnmtremVariant,
    pub seed: u64,
    /// Per-response cutoffs replacing the training prevalence in `empirical_cutoff` mode.
    pub cutoffs: Option<Vec<f64>>,
    /// Use exponential smoothing for the parameter series when the training
    /// window has at least this many occasions, moving averages otherwise.
    pub ets_min_times: usize,
}

impl Default for PnmtremForecastConfig {
    fn default() -> Self {
        Self {
            variant: PnmtremVariant { z_source: ZSource::EmpiricalBayes, history: HistoryMode::CutoffHalf },
            seed: 0,
            cutoffs: None,
            ets_min_times: 8,
        }
    }
}

/// Forecast `α_t` (per horizon step, per transition column) and `σ_t` for `m` steps.
pub fn smoothed_params(fit: &PnmtremFit, m: usize, ets_min_times: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let (alpha_method, sigma_method) = if fit.times.len() >= ets_min_times {
        (SmoothMethod::EtsAnn, SmoothMethod::EtsAan)
    } else {
        (SmoothMethod::Sma, SmoothMethod::Sma)
    };
    let q = fit.transition_names.len();
    let mut alpha = vec![vec![0.0; q]; m];
    for a in 0..q {
        let series: Vec<f64> = fit.transition.alpha.iter().map(|v| v[a]).collect();
        for (h, v) in super::smooth_params(&series, alpha_method, m)?.into_iter().enumerate() {
            alpha[h][a] = v;
        }
    }
    let sigma = super::smooth_params(&fit.transition.sigma, sigma_method, m)?
        .into_iter()
        .map(|s| s.max(1e-6))
        .collect();
    Ok((alpha, sigma))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PnmtremForecast {
    pub design: Design,
    /// `p̂` per design row.
    pub probabilities: Vec<f64>,
    /// Lagged response used for each design row.
    pub history: Vec<u8>,
}

fn check_columns(want: &[String], got: &Design) -> Result<()> {
    if got.names != want {
        return Err(Error::shape(format!("design columns {:?} do not match fitted columns {want:?}", got.names)));
    }
    Ok(())
}

/// Forecasts for the occasions of `horizon`, which follow the training window
/// directly. Held-out responses in `horizon` are read only in `observed` mode.
pub fn forecast_pnmtrem(fit: &PnmtremFit, horizon: &LongitudinalDataset, cfg: &PnmtremForecastConfig) -> Result<PnmtremForecast> {
    let design = design_matrix(horizon, &fit.formula)?;
    let zdesign = design_matrix(horizon, &fit.transition_formula)?;
    check_columns(&fit.names, &design)?;
    check_columns(&fit.transition_names, &zdesign)?;
    let (k, m) = (design.n_responses(), design.n_times);
    let cutoffs: Vec<f64> = match (&cfg.cutoffs, cfg.variant.history) {
        (_, HistoryMode::CutoffHalf) => vec![0.5; k],
        (Some(c), _) if c.len() == k => c.clone(),
        (Some(c), _) => return Err(Error::invalid(format!("{} cutoffs for {k} responses", c.len()))),
        (None, _) => fit.prevalence.clone(),
    };
    let (alpha, sigma) = smoothed_params(fit, m, cfg.ets_min_times)?;
    let eta = design.linear_predictor(&fit.transition.coefficients)?;
    if let Some(r) = eta.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("forecast covariates missing at design row {r}")));
    }
    let lambda = &fit.transition.lambda;

    let mut probabilities = vec![0.0; design.y.len()];
    let mut history = vec![0u8; design.y.len()];
    for (i, name) in horizon.subjects().iter().enumerate() {
        let idx = fit
            .subjects
            .iter()
            .position(|s| s == name)
            .ok_or_else(|| Error::invalid(format!("subject {name} was not in the fitted data")))?;
        let z = match cfg.variant.z_source {
            ZSource::EmpiricalBayes => fit.z_hat[idx],
            ZSource::Zero => 0.0,
        };
        let mut rng = rng_from_seed(derive_seed(cfg.seed, i as u64));
        for h in 0..m {
            for j in 0..k {
                let row = design.row(i, h, j);
                let (p_prev, y_prev) = if h == 0 {
                    let p_prev = fit.last_marginal[idx * k + j];
                    let y_prev = match fit.last_response[idx * k + j] {
                        Some(y) => y,
                        // unobserved at the last training occasion: treat the marginal like a forecast
                        None => (p_prev >= cutoffs[j]) as u8,
                    };
                    (p_prev, y_prev)
                } else {
                    let prev = design.row(i, h - 1, j);
                    let p_hat = probabilities[prev];
                    let y_prev = match cfg.variant.history {
                        HistoryMode::CutoffHalf | HistoryMode::EmpiricalCutoff => (p_hat >= cutoffs[j]) as u8,
                        HistoryMode::Observed => horizon.y(i, h - 1, j).ok_or_else(|| {
                            Error::invalid(format!("observed history needs held-out responses (subject {name})"))
                        })?,
                        HistoryMode::BernoulliSim => (rng.random::<f64>() < p_hat) as u8,
                    };
                    (marginal(eta[prev]).0, y_prev)
                };
                if !p_prev.is_finite() {
                    return Err(Error::invalid(format!("no marginal for the last training occasion of subject {name}")));
                }
                let w: f64 = alpha[h].iter().enumerate().map(|(a, v)| v * zdesign.x[(row, a)]).sum();
                let delta = transition_delta(marginal(eta[row]).0, p_prev, w)?.delta;
                let (l, s) = (lambda[j], sigma[h]);
                let root = (1.0 + (l * s).powi(2)).sqrt();
                probabilities[row] = norm_cdf((delta + w * y_prev as f64) * root + l * s * z);
                history[row] = y_prev;
            }
        }
    }
    Ok(PnmtremForecast { design, probabilities, history })
}
