//! Marginalized multivariate random-effects logit model.
//!
//! Marginal layer `logit P(Y_itj = 1) = x_itj'β_j`; subject layer
//! `logit P(Y_itj = 1 | z_i) = Δ_itj + a_tj z_i` with a single standard normal
//! `z_i` per subject. The loading `a_tj` is the row sum of
//! `Σ₁^{1/2} ⊗ Σ₂^{1/2}` (AR-1 `Σ₁` over time, free `Σ₂` over responses) and
//! `Δ_itj` solves the convolution with random-effect variance `Σ₂[j, j]`.

mod delta;
mod forecast;

pub use delta::{solve_delta, DeltaSolution, DeltaSolver};
pub use forecast::{fitted_mmrem, forecast_mmrem, loading, ColumnRetention, MmremForecastConfig, MmremVariant};

use nalgebra::{DMatrix, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dataset::{design_matrix, Design, LongitudinalDataset, ModelFormula};
use crate::error::{Error, Result};
use crate::gee::{fit_gee, CorrKind, GeeKind, GeeOptions};
use crate::numerics::special::{expit, softplus};
use crate::numerics::{ar1_matrix, sym_sqrt, SymmetricMatrix};
use crate::optim::{covariance_from_hessian, hessian_from_gradient, Bfgs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EbSummary {
    PosteriorMean,
    PosteriorMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MmremOptions {
    /// Gauss–Hermite order for both the Δ solve and the likelihood.
    pub quadrature: usize,
    pub max_iter: usize,
    pub grad_tol: f64,
    /// Hold γ at this value instead of estimating it.
    pub fixed_gamma: Option<f64>,
    pub eb: EbSummary,
    pub std_errors: bool,
}

impl Default for MmremOptions {
    fn default() -> Self {
        Self {
            quadrature: 40,
            max_iter: 1000,
            grad_tol: 1e-8,
            fixed_gamma: None,
            eb: EbSummary::PosteriorMean,
            std_errors: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmremFit {
    /// Per-response formula (columns grouped by response).
    pub formula: ModelFormula,
    pub names: Vec<String>,
    pub responses: Vec<String>,
    pub coefficients: Vec<f64>,
    #[serde(with = "crate::serde_nan::vec")]
    pub std_errors: Vec<f64>,
    pub gamma: f64,
    #[serde(with = "crate::serde_nan")]
    pub gamma_se: f64,
    /// Response covariance `Σ₂`.
    pub sigma2: DMatrix<f64>,
    /// Training occasions `T`.
    pub n_times: usize,
    pub subjects: Vec<String>,
    pub z_hat: Vec<f64>,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Some diagonal of `Σ₂` fell below 1e-8.
    pub boundary: bool,
    pub quadrature: usize,
    pub eb: EbSummary,
}

/// Structural quantities derived from (γ, Σ₂) for `t` occasions.
#[derive(Debug, Clone, PartialEq)]
pub struct Structure {
    /// `√Σ₂[j, j]`, the random-effect sd used in the Δ solve.
    pub scale: Vec<f64>,
    /// `a[t * k + j]`.
    pub loading: Vec<f64>,
}

fn sqrt_from_eigen(e: &SymmetricEigen<f64, Dyn>) -> DMatrix<f64> {
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// Directional derivative of `A^{1/2}` along symmetric `dA`.
fn sqrt_derivative(e: &SymmetricEigen<f64, Dyn>, da: &DMatrix<f64>) -> DMatrix<f64> {
    let v = &e.eigenvectors;
    let root = e.eigenvalues.map(|x| x.max(0.0).sqrt());
    let mut m = v.transpose() * da * v;
    for a in 0..m.nrows() {
        for b in 0..m.ncols() {
            let den = root[a] + root[b];
            m[(a, b)] = if den > 0.0 { m[(a, b)] / den } else { 0.0 };
        }
    }
    v * m * v.transpose()
}

pub(crate) fn row_sums(m: &DMatrix<f64>, cols: std::ops::Range<usize>) -> Vec<f64> {
    (0..m.nrows()).map(|r| cols.clone().map(|c| m[(r, c)]).sum()).collect()
}

/// Loadings and scales over `t` occasions using every column of `Σ₁^{1/2}`.
pub fn structure(gamma: f64, sigma2: &DMatrix<f64>, t: usize) -> Result<Structure> {
    let k = sigma2.nrows();
    let s1 = sym_sqrt(&ar1_matrix(gamma, t)?)?;
    let s2 = sym_sqrt(&SymmetricMatrix::new(sigma2.clone())?)?;
    let r1 = row_sums(&s1, 0..t);
    let r2 = row_sums(&s2, 0..k);
    let loading = r1.iter().flat_map(|a| r2.iter().map(move |b| a * b)).collect();
    let scale = (0..k).map(|j| sigma2[(j, j)].max(0.0).sqrt()).collect();
    Ok(Structure { scale, loading })
}

/// `Σ₂ = LLᵀ` from the row-major lower triangle with log diagonal.
fn sigma_from_cholesky(theta: &[f64], k: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(k, k);
    let mut idx = 0;
    for r in 0..k {
        for c in 0..=r {
            l[(r, c)] = if r == c { theta[idx].exp() } else { theta[idx] };
            idx += 1;
        }
    }
    &l * l.transpose()
}

fn cholesky_params(sigma2: &DMatrix<f64>) -> Vec<f64> {
    let k = sigma2.nrows();
    let l = sigma2.clone().cholesky().map(|c| c.l()).unwrap_or_else(|| DMatrix::identity(k, k));
    let mut out = Vec::new();
    for r in 0..k {
        for c in 0..=r {
            out.push(if r == c { l[(r, c)].max(1e-8).ln() } else { l[(r, c)] });
        }
    }
    out
}

/// Usable cells of one subject: (row, t, j).
type CellList = Vec<(usize, usize, usize)>;

fn subject_cells(design: &Design) -> Vec<CellList> {
    let k = design.n_responses();
    (0..design.n_subjects)
        .map(|i| {
            design
                .cluster(i)
                .filter(|&r| design.usable(r))
                .map(|r| {
                    let within = r - design.cluster(i).start;
                    (r, within / k, within % k)
                })
                .collect()
        })
        .collect()
}

struct Problem<'a> {
    design: &'a Design,
    cells: Vec<CellList>,
    solver: DeltaSolver,
    p: usize,
    k: usize,
    t: usize,
    fixed_gamma: Option<f64>,
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Bernoulli log-likelihood of `y` at logit `x`.
#[inline]
fn bernoulli_logit(y: u8, x: f64) -> f64 {
    if y == 1 {
        -softplus(-x)
    } else {
        -softplus(x)
    }
}

impl<'a> Problem<'a> {
    fn new(design: &'a Design, quadrature: usize, fixed_gamma: Option<f64>) -> Result<Self> {
        Ok(Self {
            design,
            cells: subject_cells(design),
            solver: DeltaSolver::new(quadrature)?,
            p: design.ncols(),
            k: design.n_responses(),
            t: design.n_times,
            fixed_gamma,
        })
    }

    fn unpack(&self, theta: &[f64]) -> (Vec<f64>, f64, DMatrix<f64>) {
        let beta = theta[..self.p].to_vec();
        let (gamma, rest) = match self.fixed_gamma {
            Some(g) => (g, &theta[self.p..]),
            None => (theta[self.p].tanh(), &theta[self.p + 1..]),
        };
        (beta, gamma, sigma_from_cholesky(rest, self.k))
    }

    fn pack(&self, beta: &[f64], gamma: f64, sigma2: &DMatrix<f64>) -> Vec<f64> {
        let mut theta = beta.to_vec();
        if self.fixed_gamma.is_none() {
            theta.push(gamma.clamp(-0.999, 0.999).atanh());
        }
        theta.extend(cholesky_params(sigma2));
        theta
    }

    /// Scales and loadings (flattened, scales first) with their Jacobian in the
    /// non-β parameters.
    fn structural(&self, psi: &[f64]) -> Option<(Vec<f64>, DMatrix<f64>)> {
        let (k, t) = (self.k, self.t);
        let mut theta = vec![0.0; self.p];
        theta.extend_from_slice(psi);
        let (_, gamma, sigma2) = self.unpack(&theta);
        let lpar = &psi[psi.len() - k * (k + 1) / 2..];
        let mut l = DMatrix::zeros(k, k);
        let mut idx = 0;
        for r in 0..k {
            for c in 0..=r {
                l[(r, c)] = if r == c { lpar[idx].exp() } else { lpar[idx] };
                idx += 1;
            }
        }
        let e1 = ar1_matrix(gamma, t).ok()?.matrix().clone().symmetric_eigen();
        let e2 = sigma2.clone().symmetric_eigen();
        let r1 = row_sums(&sqrt_from_eigen(&e1), 0..t);
        let r2 = row_sums(&sqrt_from_eigen(&e2), 0..k);
        let scale: Vec<f64> = (0..k).map(|j| sigma2[(j, j)].sqrt()).collect();
        let mut values = scale.clone();
        values.extend(r1.iter().flat_map(|a| r2.iter().map(move |b| a * b)));

        let mut jac = DMatrix::zeros(k + t * k, psi.len());
        let mut col = 0;
        if self.fixed_gamma.is_none() {
            let dgamma = 1.0 - gamma * gamma;
            let d_ar = DMatrix::from_fn(t, t, |a, b| {
                let lag = a.abs_diff(b) as i32;
                if lag == 0 { 0.0 } else { dgamma * lag as f64 * gamma.powi(lag - 1) }
            });
            let dr1 = row_sums(&sqrt_derivative(&e1, &d_ar), 0..t);
            for tt in 0..t {
                for j in 0..k {
                    jac[(k + tt * k + j, col)] = dr1[tt] * r2[j];
                }
            }
            col += 1;
        }
        for r in 0..k {
            for c in 0..=r {
                let mut dl = DMatrix::zeros(k, k);
                dl[(r, c)] = if r == c { l[(r, c)] } else { 1.0 };
                let ds = &dl * l.transpose() + &l * dl.transpose();
                let dr2 = row_sums(&sqrt_derivative(&e2, &ds), 0..k);
                for j in 0..k {
                    jac[(j, col)] = ds[(j, j)] / (2.0 * scale[j]);
                }
                for tt in 0..t {
                    for j in 0..k {
                        jac[(k + tt * k + j, col)] = r1[tt] * dr2[j];
                    }
                }
                col += 1;
            }
        }
        Some((values, jac))
    }

    /// Negative log-likelihood and gradient.
    fn evaluate(&self, theta: &[f64], want_grad: bool) -> Option<(f64, Vec<f64>)> {
        if theta.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let (beta, _, _) = self.unpack(theta);
        let psi = &theta[self.p..];
        let (st, jac) = self.structural(psi)?;
        let (scale, loading) = st.split_at(self.k);
        let eta = self.design.linear_predictor(&beta).ok()?;
        let rule = self.solver.rule();
        let nq = rule.len();
        let log_w: Vec<f64> = rule.w.iter().map(|w| w.ln()).collect();

        let mut loglik = 0.0;
        let mut g_beta = vec![0.0; self.p];
        let mut g_scale = vec![0.0; self.k];
        let mut g_load = vec![0.0; self.t * self.k];
        let mut node_ll = vec![0.0; nq];
        let mut sols: Vec<(DeltaSolution, f64)> = Vec::new();
        for cells in &self.cells {
            if cells.is_empty() {
                continue;
            }
            sols.clear();
            node_ll.copy_from_slice(&log_w);
            for &(row, t, j) in cells {
                let prob = expit(eta[row]);
                if !(prob > 0.0 && prob < 1.0) {
                    return None;
                }
                let sol = self.solver.solve(prob, scale[j]).ok()?;
                let a = loading[t * self.k + j];
                let y = self.design.y[row].unwrap();
                for (q, ll) in node_ll.iter_mut().enumerate() {
                    *ll += bernoulli_logit(y, sol.delta + a * rule.z[q]);
                }
                sols.push((sol, prob));
            }
            let li = log_sum_exp(&node_ll);
            if !li.is_finite() {
                return None;
            }
            loglik += li;
            if !want_grad {
                continue;
            }
            let omega: Vec<f64> = node_ll.iter().map(|v| (v - li).exp()).collect();
            for (&(row, t, j), (sol, prob)) in cells.iter().zip(&sols) {
                let a = loading[t * self.k + j];
                let y = self.design.y[row].unwrap() as f64;
                let (mut gd, mut ga) = (0.0, 0.0);
                for q in 0..nq {
                    let r = omega[q] * (y - expit(sol.delta + a * rule.z[q]));
                    gd += r;
                    ga += r * rule.z[q];
                }
                let d_eta = gd * sol.d_eta(*prob);
                for (c, g) in g_beta.iter_mut().enumerate() {
                    *g += d_eta * self.design.x[(row, c)];
                }
                g_scale[j] += gd * sol.d_scale();
                g_load[t * self.k + j] += ga;
            }
        }
        if !loglik.is_finite() {
            return None;
        }
        let mut grad = Vec::new();
        if want_grad {
            grad.extend(g_beta.iter().map(|g| -g));
            let g_struct: Vec<f64> = g_scale.iter().chain(&g_load).copied().collect();
            for m in 0..psi.len() {
                let d: f64 = g_struct.iter().zip(jac.column(m).iter()).map(|(g, j)| g * j).sum();
                grad.push(-d);
            }
        }
        Some((-loglik, grad))
    }
}

/// Log-likelihood of the model on `design` (per-response columns) at the given parameters.
pub fn log_likelihood(design: &Design, beta: &[f64], gamma: f64, sigma2: &DMatrix<f64>, quadrature: usize) -> Result<f64> {
    let problem = Problem::new(design, quadrature, Some(gamma))?;
    if beta.len() != problem.p || sigma2.nrows() != problem.k {
        return Err(Error::shape("parameter dimensions do not match the design"));
    }
    let theta = problem.pack(beta, gamma, sigma2);
    problem
        .evaluate(&theta, false)
        .map(|(v, _)| -v)
        .ok_or_else(|| Error::Estimation("likelihood not finite at the given parameters".into()))
}

/// Empirical-Bayes score of one subject from its usable cells.
pub fn eb_z(
    solver: &DeltaSolver,
    cells: &[(f64, f64, u8)],
    summary: EbSummary,
) -> Result<f64> {
    // cells: (Δ, loading, y)
    if cells.is_empty() {
        return Err(Error::Estimation("subject has no observed cells".into()));
    }
    let rule = solver.rule();
    let log_post: Vec<f64> = rule
        .z
        .iter()
        .zip(&rule.w)
        .map(|(&z, &w)| w.ln() + cells.iter().map(|&(d, a, y)| bernoulli_logit(y, d + a * z)).sum::<f64>())
        .collect();
    let norm = log_sum_exp(&log_post);
    let mean: f64 = rule.z.iter().zip(&log_post).map(|(z, lp)| z * (lp - norm).exp()).sum();
    match summary {
        EbSummary::PosteriorMean => Ok(mean),
        EbSummary::PosteriorMode => {
            let mut z = mean;
            for _ in 0..100 {
                let (mut g, mut h) = (-z, -1.0);
                for &(d, a, y) in cells {
                    let p = expit(d + a * z);
                    g += (y as f64 - p) * a;
                    h -= p * (1.0 - p) * a * a;
                }
                let step = g / h;
                z -= step;
                if step.abs() < 1e-12 {
                    return Ok(z);
                }
            }
            Err(Error::Convergence { context: "posterior mode".into(), iterations: 100, last: z, trace: vec![] })
        }
    }
}

/// Per-response formula as the model uses it.
pub fn model_formula(formula: &ModelFormula) -> ModelFormula {
    formula.clone().per_response(true)
}

pub fn fit_mmrem(train: &LongitudinalDataset, formula: &ModelFormula, options: &MmremOptions) -> Result<MmremFit> {
    let formula = model_formula(formula);
    let design = design_matrix(train, &formula)?;
    design.check_rank()?;
    if let Some(g) = options.fixed_gamma {
        if !(g.abs() < 1.0) {
            return Err(Error::invalid(format!("fixed gamma {g} must satisfy |gamma| < 1")));
        }
    }
    let problem = Problem::new(&design, options.quadrature, options.fixed_gamma)?;
    let k = problem.k;

    let beta0 = match fit_gee(train, &formula, CorrKind::Independence, GeeKind::Mmm1, &GeeOptions::default()) {
        Ok(g) => g.coefficients,
        Err(e) => {
            log::debug!("MMREM start values from zeros ({e})");
            vec![0.0; problem.p]
        }
    };
    let theta0 = problem.pack(&beta0, options.fixed_gamma.unwrap_or(0.5), &DMatrix::identity(k, k));
    let bfgs = Bfgs { max_iter: options.max_iter, grad_tol: options.grad_tol, ..Bfgs::default() };
    let opt = bfgs.minimize(|th| problem.evaluate(th, true), theta0)?;
    if !opt.converged {
        return Err(Error::Convergence {
            context: "MMREM likelihood".into(),
            iterations: opt.iterations,
            last: opt.value,
            trace: opt.trace,
        });
    }
    let (beta, gamma, sigma2) = problem.unpack(&opt.x);

    let (mut std_errors, mut gamma_se) = (vec![f64::NAN; problem.p], f64::NAN);
    if options.std_errors {
        match hessian_from_gradient(|th| problem.evaluate(th, true).map(|(_, g)| g), &opt.x, 1e-4) {
            Ok(h) => {
                let cov = covariance_from_hessian(&h);
                for (c, se) in std_errors.iter_mut().enumerate() {
                    *se = cov[(c, c)].sqrt();
                }
                if options.fixed_gamma.is_none() {
                    gamma_se = cov[(problem.p, problem.p)].sqrt() * (1.0 - gamma * gamma);
                }
            }
            Err(e) => log::warn!("MMREM standard errors unavailable: {e}"),
        }
    }

    let boundary = (0..k).any(|j| sigma2[(j, j)] < 1e-8);
    if boundary {
        log::warn!("MMREM: response covariance at the boundary (diagonal < 1e-8)");
    }
    let st = structure(gamma, &sigma2, problem.t)?;
    let eta = design.linear_predictor(&beta)?;
    let mut z_hat = Vec::with_capacity(design.n_subjects);
    for cells in &problem.cells {
        let mut info = Vec::with_capacity(cells.len());
        for &(row, t, j) in cells {
            let d = problem.solver.solve(expit(eta[row]), st.scale[j])?.delta;
            info.push((d, st.loading[t * k + j], design.y[row].unwrap()));
        }
        z_hat.push(eb_z(&problem.solver, &info, options.eb)?);
    }

    Ok(MmremFit {
        names: design.names.clone(),
        responses: design.responses.iter().map(|&r| train.responses()[r].clone()).collect(),
        formula,
        coefficients: beta,
        std_errors,
        gamma,
        gamma_se,
        sigma2,
        n_times: problem.t,
        subjects: train.subjects().to_vec(),
        z_hat,
        log_likelihood: -opt.value,
        iterations: opt.iterations,
        converged: opt.converged,
        boundary,
        quadrature: options.quadrature,
        eb: options.eb,
    })
}

#[cfg(test)]
mod tests;
