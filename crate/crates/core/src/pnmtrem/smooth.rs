//! Forecasting the per-occasion parameter series beyond the training window.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothMethod {
    /// Simple exponential smoothing (additive error, no trend).
    EtsAnn,
    /// Additive-trend exponential smoothing.
    EtsAan,
    /// Mean of the series, held constant.
    Sma,
}

fn grid() -> impl Iterator<Item = f64> + Clone {
    (0..50).map(|i| 0.01 + 0.02 * i as f64)
}

fn ann_sse(series: &[f64], a: f64) -> (f64, f64) {
    let mut level = series[0];
    let mut sse = 0.0;
    for &y in &series[1..] {
        let e = y - level;
        sse += e * e;
        level += a * e;
    }
    (sse, level)
}

fn aan_sse(series: &[f64], a: f64, b: f64) -> (f64, f64, f64) {
    let mut level = series[0];
    let mut trend = series[1] - series[0];
    let mut sse = 0.0;
    for &y in &series[1..] {
        let e = y - (level + trend);
        sse += e * e;
        level += trend + a * e;
        trend += a * b * e;
    }
    (sse, level, trend)
}

/// `m` forecasts of `series`. Smoothing weights are picked from 0.01..0.99
/// (step 0.02) by in-sample one-step squared error; ties keep the smaller weight.
pub fn smooth_params(series: &[f64], method: SmoothMethod, m: usize) -> Result<Vec<f64>> {
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("parameter series has non-finite values"));
    }
    let need = if method == SmoothMethod::Sma { 1 } else { 2 };
    if series.len() < need {
        return Err(Error::invalid(format!("{method:?} needs at least {need} points, got {}", series.len())));
    }
    Ok(match method {
        SmoothMethod::Sma => vec![series.iter().sum::<f64>() / series.len() as f64; m],
        SmoothMethod::EtsAnn => {
            let mut best = (f64::INFINITY, 0.0);
            for a in grid() {
                let (sse, level) = ann_sse(series, a);
                if sse < best.0 {
                    best = (sse, level);
                }
            }
            vec![best.1; m]
        }
        SmoothMethod::EtsAan => {
            let mut best = (f64::INFINITY, 0.0, 0.0);
            for a in grid() {
                for b in grid() {
                    let (sse, level, trend) = aan_sse(series, a, b);
                    if sse < best.0 {
                        best = (sse, level, trend);
                    }
                }
            }
            (1..=m).map(|h| best.1 + h as f64 * best.2).collect()
        }
    })
}
