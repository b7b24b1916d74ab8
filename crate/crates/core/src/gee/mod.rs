//! Marginal logit models for (multivariate) longitudinal binary data fitted by
//! generalized estimating equations: UMM (one response), MMM1 (response-specific
//! coefficients) and MMM2 (shared coefficients with response indicators).

mod corr;

pub use corr::{estimate_working_corr, ClusterResiduals, CorrKind, WorkingCorrelation};

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{design_matrix, Design, LongitudinalDataset, ModelFormula};
use crate::error::{Error, Result};
use crate::numerics::special::expit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GeeKind {
    #[serde(rename = "UMM")]
    Umm,
    #[serde(rename = "MMM1")]
    Mmm1,
    #[serde(rename = "MMM2")]
    Mmm2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeeOptions {
    /// Convergence threshold on `max |Δβ|`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for GeeOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeeFit {
    pub kind: GeeKind,
    pub formula: ModelFormula,
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub working_correlation: WorkingCorrelation,
    pub naive_covariance: DMatrix<f64>,
    pub sandwich_covariance: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// `max |Δβ|` per iteration.
    pub trace: Vec<f64>,
}

impl GeeFit {
    pub fn std_errors(&self) -> Vec<f64> {
        (0..self.coefficients.len()).map(|c| self.sandwich_covariance[(c, c)].sqrt()).collect()
    }

    /// Fitted marginal probabilities on the cells of `ds`.
    pub fn predict(&self, ds: &LongitudinalDataset) -> Result<(Design, Vec<f64>)> {
        let design = design_matrix(ds, &self.formula)?;
        let p = forecast_marginal(self, &design)?;
        Ok((design, p))
    }
}

/// Formula as the model family uses it.
pub fn family_formula(formula: &ModelFormula, kind: GeeKind) -> ModelFormula {
    let mut f = formula.clone();
    match kind {
        GeeKind::Umm => {}
        GeeKind::Mmm1 => f.per_response = true,
        GeeKind::Mmm2 => f.per_response = false,
    }
    f
}

struct Cluster {
    rows: Vec<usize>,
    /// Positions of `rows` in the full cluster layout.
    slots: Vec<usize>,
}

fn clusters(design: &Design) -> Vec<Cluster> {
    (0..design.n_subjects)
        .map(|i| {
            let range = design.cluster(i);
            let start = range.start;
            let rows: Vec<usize> = range.filter(|&r| design.usable(r)).collect();
            let slots = rows.iter().map(|r| r - start).collect();
            Cluster { rows, slots }
        })
        .filter(|c: &Cluster| !c.rows.is_empty())
        .collect()
}

fn submatrix(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |a, b| m[(idx[a], idx[b])])
}

fn inverse_spd(m: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    Cholesky::new(m)
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Estimation(format!("{what} is not positive definite")))
}

const MAX_ETA_STEP: f64 = 4.0;

pub fn fit_gee(
    train: &LongitudinalDataset,
    formula: &ModelFormula,
    corr: CorrKind,
    kind: GeeKind,
    options: &GeeOptions,
) -> Result<GeeFit> {
    let formula = family_formula(formula, kind);
    let design = design_matrix(train, &formula)?;
    if kind == GeeKind::Umm && design.n_responses() != 1 {
        return Err(Error::Formula(format!(
            "UMM models one response; formula selects {}",
            design.n_responses()
        )));
    }
    design.check_rank()?;
    let clusters = clusters(&design);
    if clusters.len() < 2 {
        return Err(Error::Estimation("GEE needs at least two clusters with data".into()));
    }
    let (t, k, p) = (design.n_times, design.n_responses(), design.ncols());
    let dim = t * k;
    let y: Vec<f64> = design.y.iter().map(|v| v.map_or(f64::NAN, f64::from)).collect();

    let mut beta = DVector::<f64>::zeros(p);
    let mut working = WorkingCorrelation::initial(corr, dim);
    let mut trace = Vec::new();
    let mut converged = false;

    // Pearson residuals and sqrt-variance at the current β
    let evaluate = |beta: &DVector<f64>| -> (Vec<f64>, Vec<f64>) {
        let eta = &design.x * beta;
        let mut resid = vec![f64::NAN; y.len()];
        let mut sd = vec![f64::NAN; y.len()];
        for c in &clusters {
            for &r in &c.rows {
                let mu = expit(eta[r]);
                let s = (mu * (1.0 - mu)).sqrt();
                sd[r] = s;
                resid[r] = (y[r] - mu) / s;
            }
        }
        (resid, sd)
    };
    let cluster_residuals = |resid: &[f64]| -> Vec<ClusterResiduals> {
        clusters
            .iter()
            .map(|c| {
                let mut full = vec![None; dim];
                for (&r, &s) in c.rows.iter().zip(&c.slots) {
                    full[s] = Some(resid[r]);
                }
                full
            })
            .collect()
    };

    // cumulative pieces reused for the sandwich at the end
    let accumulate = |beta: &DVector<f64>, working: &WorkingCorrelation| -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
        let (resid, sd) = evaluate(beta);
        let full = working.matrix(t, k);
        let full_inv = inverse_spd(full.clone(), "working correlation")?;
        let mut b = DMatrix::zeros(p, p);
        let mut u = DVector::zeros(p);
        let mut meat = DMatrix::zeros(p, p);
        for c in &clusters {
            let n = c.rows.len();
            let z = DMatrix::from_fn(n, p, |a, col| sd[c.rows[a]] * design.x[(c.rows[a], col)]);
            let r = DVector::from_iterator(n, c.rows.iter().map(|&row| resid[row]));
            let rinv = if n == dim { full_inv.clone() } else { inverse_spd(submatrix(&full, &c.slots), "working correlation")? };
            let zt_rinv = z.transpose() * rinv;
            b += &zt_rinv * &z;
            let score = &zt_rinv * r;
            meat += &score * score.transpose();
            u += score;
        }
        Ok((b, u, meat))
    };

    let mut iterations = 0;
    while iterations < options.max_iter {
        iterations += 1;
        if corr != CorrKind::Independence {
            let (resid, _) = evaluate(&beta);
            working = estimate_working_corr(&cluster_residuals(&resid), corr, t, k)?;
        }
        let (b, u, _) = accumulate(&beta, &working)?;
        let step = Cholesky::new(b)
            .map(|c| c.solve(&u))
            .ok_or_else(|| Error::Convergence {
                context: "GEE scoring (singular weighted cross-product)".into(),
                iterations,
                last: trace.last().copied().unwrap_or(f64::NAN),
                trace: trace.clone(),
            })?;
        // damp steps that would move some linear predictor by more than MAX_ETA_STEP
        let eta_step = (&design.x * &step).iter().filter(|v| v.is_finite()).fold(0.0f64, |m, v| m.max(v.abs()));
        let step = if eta_step > MAX_ETA_STEP { step * (MAX_ETA_STEP / eta_step) } else { step };
        let change = step.amax();
        beta += &step;
        trace.push(change);
        if !change.is_finite() || !beta.iter().all(|v| v.is_finite()) {
            break;
        }
        if change < options.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Convergence {
            context: format!("GEE {kind:?}"),
            iterations,
            last: trace.last().copied().unwrap_or(f64::NAN),
            trace,
        });
    }
    let (b, _, meat) = accumulate(&beta, &working)?;
    let bread = inverse_spd(b, "weighted cross-product")?;
    let sandwich = &bread * meat * &bread;
    let sandwich = (&sandwich + sandwich.transpose()) * 0.5;
    Ok(GeeFit {
        kind,
        formula,
        names: design.names.clone(),
        coefficients: beta.as_slice().to_vec(),
        working_correlation: working,
        naive_covariance: bread,
        sandwich_covariance: sandwich,
        iterations,
        converged,
        trace,
    })
}

/// Marginal success probabilities `expit(x·β̂)` for every row of `design`.
pub fn forecast_marginal(fit: &GeeFit, design: &Design) -> Result<Vec<f64>> {
    if design.names != fit.names {
        return Err(Error::shape(format!(
            "design columns {:?} do not match fitted columns {:?}",
            design.names, fit.names
        )));
    }
    Ok(design.linear_predictor(&fit.coefficients)?.into_iter().map(expit).collect())
}
