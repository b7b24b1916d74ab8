//! Transition models TM(1)/TM(2) for forecasting time-varying covariates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::LongitudinalDataset;
use crate::error::{Error, Result};

/// Pooled least-squares autoregression `X_t = β₀ + β₁X_{t-1} [+ β₂X_{t-2}] + ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionFit {
    pub covariate: String,
    pub order: usize,
    /// `[β₀, β₁, β₂…]`.
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub sigma2: f64,
    pub n_obs: usize,
}

fn covariate_values<'a>(ds: &'a LongitudinalDataset, name: &str) -> Result<&'a [f64]> {
    Ok(&ds
        .covariate(name)
        .ok_or_else(|| Error::Formula(format!("unknown covariate {name}")))?
        .values)
}

pub fn fit_tm(ds: &LongitudinalDataset, covariate: &str, order: usize) -> Result<TransitionFit> {
    if !(1..=2).contains(&order) {
        return Err(Error::invalid(format!("transition order {order} not supported (1 or 2)")));
    }
    let t = ds.n_times();
    if t < order + 1 {
        return Err(Error::invalid(format!("TM({order}) needs at least {} occasions, got {t}", order + 1)));
    }
    let values = covariate_values(ds, covariate)?;
    let mut rows: Vec<f64> = Vec::new();
    let mut target = Vec::new();
    for i in 0..ds.n_subjects() {
        let series = &values[i * t..(i + 1) * t];
        for tt in order..t {
            let lags: Vec<f64> = (1..=order).map(|l| series[tt - l]).collect();
            if series[tt].is_nan() || lags.iter().any(|v| v.is_nan()) {
                continue;
            }
            rows.push(1.0);
            rows.extend(lags);
            target.push(series[tt]);
        }
    }
    let p = order + 1;
    let n = target.len();
    if n <= p {
        return Err(Error::Estimation(format!("TM({order}) for {covariate}: only {n} usable pairs")));
    }
    let x = DMatrix::from_row_slice(n, p, &rows);
    let y = DVector::from_vec(target);
    let names: Vec<String> = std::iter::once("(Intercept)".to_string())
        .chain((1..=order).map(|l| format!("lag{l}({covariate})")))
        .collect();
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let dependent: Vec<String> = {
        let v_t = svd.v_t.as_ref().unwrap();
        let mut cols = Vec::new();
        for (s_idx, &s) in svd.singular_values.iter().enumerate() {
            if s <= 1e-10 * smax {
                // name the column carrying most of the null direction
                let row = v_t.row(s_idx);
                let c = row.iter().enumerate().fold(0, |best, (c, v)| if v.abs() > row[best].abs() { c } else { best });
                cols.push(names[c].clone());
            }
        }
        cols
    };
    if !dependent.is_empty() {
        return Err(Error::RankDeficient { columns: dependent });
    }
    let beta = svd.solve(&y, 1e-14).map_err(|e| Error::Estimation(e.to_string()))?;
    let resid = &y - &x * &beta;
    let sigma2 = resid.norm_squared() / (n - p) as f64;
    let xtx_inv = (x.transpose() * &x)
        .try_inverse()
        .ok_or_else(|| Error::RankDeficient { columns: names.clone() })?;
    let std_errors = (0..p).map(|c| (sigma2 * xtx_inv[(c, c)]).sqrt()).collect();
    Ok(TransitionFit {
        covariate: covariate.to_string(),
        order,
        coefficients: beta.as_slice().to_vec(),
        std_errors,
        sigma2,
        n_obs: n,
    })
}

impl TransitionFit {
    fn predict(&self, lags: &[f64]) -> f64 {
        self.coefficients[0] + lags.iter().zip(&self.coefficients[1..]).map(|(x, b)| x * b).sum::<f64>()
    }
}

/// Recursive point forecasts for the `horizon` occasions after the panel ends,
/// laid out `out[i * horizon + h]`.
pub fn forecast_tm(fit: &TransitionFit, ds: &LongitudinalDataset, horizon: usize) -> Result<Vec<f64>> {
    if horizon == 0 {
        return Err(Error::invalid("forecast horizon must be positive"));
    }
    let t = ds.n_times();
    if t < fit.order {
        return Err(Error::invalid(format!("need {} observed occasions to forecast", fit.order)));
    }
    let values = covariate_values(ds, &fit.covariate)?;
    let mut out = Vec::with_capacity(ds.n_subjects() * horizon);
    for i in 0..ds.n_subjects() {
        // most recent first
        let mut lags: Vec<f64> = (1..=fit.order).map(|l| values[i * t + t - l]).collect();
        for _ in 0..horizon {
            let next = fit.predict(&lags);
            out.push(next);
            lags.rotate_right(1);
            lags[0] = next;
        }
    }
    Ok(out)
}

/// In-sample one-step fitted values, `out[i * T + t]`; `NaN` for the first `order` occasions.
pub fn fitted_tm(fit: &TransitionFit, ds: &LongitudinalDataset) -> Result<Vec<f64>> {
    let t = ds.n_times();
    let values = covariate_values(ds, &fit.covariate)?;
    let mut out = vec![f64::NAN; ds.n_subjects() * t];
    for i in 0..ds.n_subjects() {
        for tt in fit.order..t {
            let lags: Vec<f64> = (1..=fit.order).map(|l| values[i * t + tt - l]).collect();
            out[i * t + tt] = fit.predict(&lags);
        }
    }
    Ok(out)
}
