//! First-order probit-normal marginalized transition random-effects model.
//!
//! For `t ≥ 2`: marginal `Φ(xβ)`, transition layer `Φ(Δ + α_t·Z·y_{t-1})` and
//! subject layer `Φ(Δ* + λ_j σ_t z)`; occasion 1 has its own marginal `Φ(xβ*)`
//! with subject layer `Φ(Δ*₁ + λ*_j σ₁ z)`. One standard normal `z` per subject
//! is shared by every occasion and response. `λ₁ = λ*₁ = 1`.

mod delta;
mod forecast;
mod smooth;

pub use delta::{solve_delta_star, solve_delta_t, transition_delta, TransitionDelta};
pub use forecast::{forecast_pnmtrem, smoothed_params, HistoryMode, PnmtremForecast, PnmtremForecastConfig, PnmtremVariant, ZSource};
pub use smooth::{smooth_params, SmoothMethod};

use serde::{Deserialize, Serialize};

use crate::dataset::{design_matrix, Design, LongitudinalDataset, ModelFormula};
use crate::error::{Error, Result};
use crate::numerics::special::{log_norm_cdf, mills, norm_cdf, norm_pdf};
use crate::numerics::NormalRule;
use crate::optim::{covariance_from_hessian, hessian_from_gradient, Bfgs, Minimum};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PnmtremOptions {
    pub quadrature: usize,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub std_errors: bool,
}

impl Default for PnmtremOptions {
    fn default() -> Self {
        Self { quadrature: 40, max_iter: 1000, grad_tol: 1e-8, std_errors: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineBlock {
    /// `β*`.
    pub coefficients: Vec<f64>,
    #[serde(with = "crate::serde_nan::vec")]
    pub std_errors: Vec<f64>,
    /// `λ*_j`, first entry fixed at 1.
    pub lambda: Vec<f64>,
    /// `σ₁`.
    pub sigma: f64,
    pub log_likelihood: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionBlock {
    pub coefficients: Vec<f64>,
    #[serde(with = "crate::serde_nan::vec")]
    pub std_errors: Vec<f64>,
    /// `α_t` for occasions 2..T, one entry per transition column.
    pub alpha: Vec<Vec<f64>>,
    #[serde(with = "crate::serde_nan::nested")]
    pub alpha_se: Vec<Vec<f64>>,
    /// `λ_j`, first entry fixed at 1.
    pub lambda: Vec<f64>,
    /// `σ_t` for occasions 2..T.
    pub sigma: Vec<f64>,
    pub log_likelihood: f64,
    pub iterations: usize,
    /// Some `σ_t` fell below 1e-6.
    pub boundary: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PnmtremFit {
    pub formula: ModelFormula,
    /// Columns `Z` multiplying the lagged response.
    pub transition_formula: ModelFormula,
    pub names: Vec<String>,
    pub transition_names: Vec<String>,
    pub responses: Vec<String>,
    pub subjects: Vec<String>,
    pub times: Vec<i64>,
    pub baseline: BaselineBlock,
    pub transition: TransitionBlock,
    pub z_hat: Vec<f64>,
    /// `Φ(x_T β)` per subject and response (`i * k + j`), `NaN` if covariates are missing.
    #[serde(with = "crate::serde_nan::vec")]
    pub last_marginal: Vec<f64>,
    /// Responses at the last training occasion.
    pub last_response: Vec<Option<u8>>,
    /// Training prevalence per response.
    pub prevalence: Vec<f64>,
    pub quadrature: usize,
}

/// One Bernoulli probit cell under the shared score: `P(y = 1 | z) = Φ(offset + slope·z)`.
#[derive(Debug, Clone, Copy)]
struct Cell {
    offset: f64,
    slope: f64,
    y: u8,
}

#[inline]
fn log_lik(y: u8, c: f64) -> f64 {
    if y == 1 {
        log_norm_cdf(c)
    } else {
        log_norm_cdf(-c)
    }
}

#[inline]
fn score(y: u8, c: f64) -> f64 {
    if y == 1 {
        mills(c)
    } else {
        -mills(-c)
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Marginal log-likelihood of one subject and, when `grads` is given, the
/// posterior-weighted scores `(Σ ω s, Σ ω s z)` per cell.
fn subject_pass(rule: &NormalRule, cells: &[Cell], node: &mut [f64], grads: Option<&mut Vec<(f64, f64)>>) -> f64 {
    for (q, v) in node.iter_mut().enumerate() {
        *v = rule.w[q].ln() + cells.iter().map(|c| log_lik(c.y, c.offset + c.slope * rule.z[q])).sum::<f64>();
    }
    let li = log_sum_exp(node);
    if let Some(out) = grads {
        out.clear();
        for v in node.iter_mut() {
            *v = (*v - li).exp();
        }
        for c in cells {
            let (mut g, mut gz) = (0.0, 0.0);
            for (q, &w) in node.iter().enumerate() {
                let s = w * score(c.y, c.offset + c.slope * rule.z[q]);
                g += s;
                gz += s * rule.z[q];
            }
            out.push((g, gz));
        }
    }
    li
}

fn posterior_mean(rule: &NormalRule, cells: &[Cell]) -> f64 {
    if cells.is_empty() {
        return 0.0;
    }
    let mut node = vec![0.0; rule.len()];
    let li = subject_pass(rule, cells, &mut node, None);
    rule.z.iter().zip(&node).map(|(z, v)| z * (v - li).exp()).sum()
}

/// Marginal linear predictors are capped here so `Φ(η)` stays strictly inside (0, 1).
const ETA_MAX: f64 = 8.0;

/// `(Φ(η), dΦ/dη)` with `η` capped at `±ETA_MAX`.
pub(crate) fn marginal(eta: f64) -> (f64, f64) {
    if eta.abs() > ETA_MAX {
        (norm_cdf(ETA_MAX.copysign(eta)), 0.0)
    } else {
        (norm_cdf(eta), norm_pdf(eta))
    }
}

fn lambda_full(free: &[f64]) -> Vec<f64> {
    std::iter::once(1.0).chain(free.iter().copied()).collect()
}

/// Weight of the `Σλ² + Σ(ln σ)²` anchor added to both negative
/// log-likelihoods. With k = 2 the occasion-1 likelihood is flat along a ridge
/// in `(λ*, σ₁)` and the transition block can run off to `σ_t → ∞`; the anchor
/// keeps both at a finite point.
const RIDGE_ANCHOR: f64 = 1e-3;

/// Anchor over the scale parameters `theta[from..]`, added to `value` and `grad`.
fn add_anchor(theta: &[f64], from: usize, value: &mut f64, grad: &mut [f64]) {
    for c in from..theta.len() {
        *value += RIDGE_ANCHOR * theta[c] * theta[c];
        grad[c] += 2.0 * RIDGE_ANCHOR * theta[c];
    }
}

fn anchor_value(theta: &[f64], from: usize) -> f64 {
    theta[from..].iter().map(|v| RIDGE_ANCHOR * v * v).sum()
}

struct Baseline<'a> {
    design: &'a Design,
    /// Usable occasion-1 rows per subject.
    rows: Vec<Vec<usize>>,
    rule: NormalRule,
}

impl Baseline<'_> {
    fn n_params(&self) -> usize {
        self.design.ncols() + self.design.n_responses()
    }

    fn unpack<'t>(&self, theta: &'t [f64]) -> (&'t [f64], Vec<f64>, f64) {
        let p = self.design.ncols();
        let k = self.design.n_responses();
        (&theta[..p], lambda_full(&theta[p..p + k - 1]), theta[p + k - 1].exp())
    }

    fn cells(&self, theta: &[f64], eta: &[f64], i: usize) -> Vec<Cell> {
        let (_, lambda, sigma) = self.unpack(theta);
        self.rows[i]
            .iter()
            .map(|&r| {
                let j = r % self.design.n_responses();
                let root = (1.0 + (lambda[j] * sigma).powi(2)).sqrt();
                Cell { offset: eta[r] * root, slope: lambda[j] * sigma, y: self.design.y[r].unwrap() }
            })
            .collect()
    }

    fn evaluate(&self, theta: &[f64], want_grad: bool) -> Option<(f64, Vec<f64>)> {
        if theta.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let p = self.design.ncols();
        let k = self.design.n_responses();
        let (beta, lambda, sigma) = self.unpack(theta);
        let eta = self.design.linear_predictor(beta).ok()?;
        let mut node = vec![0.0; self.rule.len()];
        let mut scores = Vec::new();
        let mut total = 0.0;
        let mut grad = vec![0.0; theta.len()];
        for i in 0..self.rows.len() {
            if self.rows[i].is_empty() {
                continue;
            }
            let cells = self.cells(theta, &eta, i);
            total += subject_pass(&self.rule, &cells, &mut node, want_grad.then_some(&mut scores));
            if !want_grad {
                continue;
            }
            for (&r, &(g, gz)) in self.rows[i].iter().zip(&scores) {
                let j = r % k;
                let l = lambda[j];
                let root = (1.0 + (l * sigma).powi(2)).sqrt();
                let e = eta[r];
                for c in 0..p {
                    grad[c] += g * root * self.design.x[(r, c)];
                }
                if j > 0 {
                    grad[p + j - 1] += sigma * gz + g * e * l * sigma * sigma / root;
                }
                grad[p + k - 1] += sigma * (l * gz + g * e * l * l * sigma / root);
            }
        }
        if !total.is_finite() {
            return None;
        }
        let mut grad: Vec<f64> = grad.into_iter().map(|g| -g).collect();
        let mut value = -total;
        add_anchor(theta, p, &mut value, &mut grad);
        Some((value, grad))
    }
}

#[derive(Debug, Clone, Copy)]
struct TransitionCell {
    row: usize,
    prev: usize,
    t: usize,
    j: usize,
    y: u8,
    y_prev: u8,
}

struct Transition<'a> {
    design: &'a Design,
    zdesign: &'a Design,
    cells: Vec<Vec<TransitionCell>>,
    /// Occasion-1 linear predictor from the baseline block (by row).
    base_eta: Vec<f64>,
    /// Occasion-1 cells under the fixed baseline block; they share the score.
    base_cells: Vec<Vec<Cell>>,
    rule: NormalRule,
}

/// Per-cell quantities of the transition layer.
struct Terms {
    /// `dΦ(η)/dη` at the current and lagged occasions.
    dp: f64,
    dp_prev: f64,
    delta: TransitionDelta,
    /// `Δ + w·y_prev`.
    m: f64,
    root: f64,
    cell: Cell,
}

impl Transition<'_> {
    fn dims(&self) -> (usize, usize, usize, usize) {
        (self.design.ncols(), self.zdesign.ncols(), self.design.n_responses(), self.design.n_times)
    }

    fn n_params(&self) -> usize {
        let (p, q, k, t) = self.dims();
        p + (t - 1) * q + (k - 1) + (t - 1)
    }

    fn unpack<'t>(&self, theta: &'t [f64]) -> (&'t [f64], &'t [f64], Vec<f64>, Vec<f64>) {
        let (p, q, k, t) = self.dims();
        let a_end = p + (t - 1) * q;
        let sigma = theta[a_end + k - 1..].iter().map(|v| v.exp()).collect();
        (&theta[..p], &theta[p..a_end], lambda_full(&theta[a_end..a_end + k - 1]), sigma)
    }

    fn terms(&self, theta: &[f64], eta: &[f64], c: &TransitionCell) -> Option<Terms> {
        let (_, q, _, _) = self.dims();
        let (_, alpha, lambda, sigma) = self.unpack(theta);
        let eta_prev = if c.t == 1 { self.base_eta[c.prev] } else { eta[c.prev] };
        let w: f64 = (0..q).map(|a| alpha[(c.t - 1) * q + a] * self.zdesign.x[(c.row, a)]).sum();
        let ((p, dp), (p_prev, dp_prev)) = (marginal(eta[c.row]), marginal(eta_prev));
        let delta = transition_delta(p, p_prev, w).ok()?;
        let m = delta.delta + w * c.y_prev as f64;
        let (l, s) = (lambda[c.j], sigma[c.t - 1]);
        let root = (1.0 + (l * s).powi(2)).sqrt();
        Some(Terms { dp, dp_prev, delta, m, root, cell: Cell { offset: m * root, slope: l * s, y: c.y } })
    }

    fn evaluate(&self, theta: &[f64], want_grad: bool) -> Option<(f64, Vec<f64>)> {
        if theta.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let (p, q, k, t) = self.dims();
        let a_end = p + (t - 1) * q;
        let (beta, _, lambda, sigma) = self.unpack(theta);
        let eta = self.design.linear_predictor(beta).ok()?;
        let mut node = vec![0.0; self.rule.len()];
        let mut scores = Vec::new();
        let mut total = 0.0;
        let mut grad = vec![0.0; theta.len()];
        for (i, cells) in self.cells.iter().enumerate() {
            if cells.is_empty() {
                continue;
            }
            let terms = cells.iter().map(|c| self.terms(theta, &eta, c)).collect::<Option<Vec<_>>>()?;
            let base = &self.base_cells[i];
            let probit: Vec<Cell> = base.iter().copied().chain(terms.iter().map(|t| t.cell)).collect();
            total += subject_pass(&self.rule, &probit, &mut node, want_grad.then_some(&mut scores));
            if !want_grad {
                continue;
            }
            for ((c, tm), &(g, gz)) in cells.iter().zip(&terms).zip(&scores[base.len()..]) {
                let (l, s) = (lambda[c.j], sigma[c.t - 1]);
                let gm = g * tm.root;
                let d_eta = gm * tm.delta.d_p * tm.dp;
                for col in 0..p {
                    grad[col] += d_eta * self.design.x[(c.row, col)];
                }
                if c.t > 1 {
                    let d_prev = gm * tm.delta.d_p_prev * tm.dp_prev;
                    for col in 0..p {
                        grad[col] += d_prev * self.design.x[(c.prev, col)];
                    }
                }
                let d_w = gm * (c.y_prev as f64 + tm.delta.d_w);
                for a in 0..q {
                    grad[p + (c.t - 1) * q + a] += d_w * self.zdesign.x[(c.row, a)];
                }
                if c.j > 0 {
                    grad[a_end + c.j - 1] += s * gz + g * tm.m * l * s * s / tm.root;
                }
                grad[a_end + k - 1 + c.t - 1] += s * (l * gz + g * tm.m * l * l * s / tm.root);
            }
        }
        if !total.is_finite() {
            return None;
        }
        let mut grad: Vec<f64> = grad.into_iter().map(|g| -g).collect();
        let mut value = -total;
        add_anchor(theta, a_end, &mut value, &mut grad);
        Some((value, grad))
    }
}

fn minimize<F>(f: F, x0: Vec<f64>, options: &PnmtremOptions, context: &str) -> Result<Minimum>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let bfgs = Bfgs { max_iter: options.max_iter, grad_tol: options.grad_tol, ..Bfgs::default() };
    let opt = bfgs.minimize(f, x0)?;
    if !opt.converged {
        return Err(Error::Convergence {
            context: context.into(),
            iterations: opt.iterations,
            last: opt.value,
            trace: opt.trace,
        });
    }
    Ok(opt)
}

fn std_errors<G>(grad: G, x: &[f64], enabled: bool) -> Vec<f64>
where
    G: FnMut(&[f64]) -> Option<Vec<f64>>,
{
    if !enabled {
        return vec![f64::NAN; x.len()];
    }
    match hessian_from_gradient(grad, x, 1e-4) {
        Ok(h) => {
            let cov = covariance_from_hessian(&h);
            (0..x.len()).map(|c| cov[(c, c)].sqrt()).collect()
        }
        Err(e) => {
            log::warn!("PNMTREM standard errors unavailable: {e}");
            vec![f64::NAN; x.len()]
        }
    }
}

fn check_formulas(train: &LongitudinalDataset, formula: &ModelFormula, transition: &ModelFormula) -> Result<(Design, Design)> {
    if train.n_times() < 2 {
        return Err(Error::invalid("PNMTREM needs at least two training occasions"));
    }
    let design = design_matrix(train, formula)?;
    design.check_rank()?;
    let transition = transition.clone().with_responses(formula.responses.clone());
    let zdesign = design_matrix(train, &transition)?;
    Ok((design, zdesign))
}

fn baseline_rows(design: &Design) -> Vec<Vec<usize>> {
    (0..design.n_subjects)
        .map(|i| (0..design.n_responses()).map(|j| design.row(i, 0, j)).filter(|&r| design.usable(r)).collect())
        .collect()
}

fn transition_cells(design: &Design, zdesign: &Design) -> Vec<Vec<TransitionCell>> {
    let k = design.n_responses();
    (0..design.n_subjects)
        .map(|i| {
            let mut out = Vec::new();
            for t in 1..design.n_times {
                for j in 0..k {
                    let (row, prev) = (design.row(i, t, j), design.row(i, t - 1, j));
                    if design.usable(row) && zdesign.covariates_complete(row) && design.usable(prev) {
                        out.push(TransitionCell {
                            row,
                            prev,
                            t,
                            j,
                            y: design.y[row].unwrap(),
                            y_prev: design.y[prev].unwrap(),
                        });
                    }
                }
            }
            out
        })
        .collect()
}

/// Fit the occasion-1 block: `(β*, λ*_{2..k}, σ₁)`.
pub fn fit_baseline(train: &LongitudinalDataset, formula: &ModelFormula, options: &PnmtremOptions) -> Result<BaselineBlock> {
    let design = design_matrix(train, formula)?;
    fit_baseline_design(&design, options)
}

fn fit_baseline_design(design: &Design, options: &PnmtremOptions) -> Result<BaselineBlock> {
    let problem = Baseline { design, rows: baseline_rows(design), rule: NormalRule::new(options.quadrature)? };
    let (p, k) = (design.ncols(), design.n_responses());
    let mut theta0 = vec![0.0; problem.n_params()];
    theta0[p..p + k - 1].fill(1.0);
    let opt = minimize(|th| problem.evaluate(th, true), theta0, options, "PNMTREM baseline likelihood")?;
    let se = std_errors(|th| problem.evaluate(th, true).map(|(_, g)| g), &opt.x, options.std_errors);
    let (beta, lambda, sigma) = problem.unpack(&opt.x);
    Ok(BaselineBlock {
        coefficients: beta.to_vec(),
        std_errors: se[..p].to_vec(),
        lambda,
        sigma,
        log_likelihood: anchor_value(&opt.x, p) - opt.value,
        iterations: opt.iterations,
    })
}

fn baseline_theta(block: &BaselineBlock) -> Vec<f64> {
    let mut theta = block.coefficients.clone();
    theta.extend(&block.lambda[1..]);
    theta.push(block.sigma.ln());
    theta
}

fn transition_problem<'a>(
    design: &'a Design,
    zdesign: &'a Design,
    baseline: &BaselineBlock,
    quadrature: usize,
) -> Result<Transition<'a>> {
    let base_eta = design.linear_predictor(&baseline.coefficients)?;
    let base = Baseline { design, rows: baseline_rows(design), rule: NormalRule::new(quadrature)? };
    let theta = baseline_theta(baseline);
    let base_cells = (0..design.n_subjects).map(|i| base.cells(&theta, &base_eta, i)).collect();
    Ok(Transition { design, zdesign, cells: transition_cells(design, zdesign), base_eta, base_cells, rule: base.rule })
}

fn fit_transition_design(
    design: &Design,
    zdesign: &Design,
    baseline: &BaselineBlock,
    options: &PnmtremOptions,
) -> Result<TransitionBlock> {
    let problem = transition_problem(design, zdesign, baseline, options.quadrature)?;
    let (p, q, _, t) = problem.dims();
    let mut theta0 = baseline.coefficients.clone();
    theta0.extend(vec![0.0; (t - 1) * q]);
    theta0.extend(&baseline.lambda[1..]);
    theta0.extend(vec![baseline.sigma.max(0.1).ln(); t - 1]);
    debug_assert_eq!(theta0.len(), problem.n_params());
    let opt = minimize(|th| problem.evaluate(th, true), theta0, options, "PNMTREM transition likelihood")?;
    let se = std_errors(|th| problem.evaluate(th, true).map(|(_, g)| g), &opt.x, options.std_errors);
    let (beta, alpha, lambda, sigma) = problem.unpack(&opt.x);
    let boundary = sigma.iter().any(|&s| s < 1e-6);
    if boundary {
        log::warn!("PNMTREM: random-effect sd at the lower bound 1e-6");
    }
    Ok(TransitionBlock {
        coefficients: beta.to_vec(),
        std_errors: se[..p].to_vec(),
        alpha: alpha.chunks(q).map(<[f64]>::to_vec).collect(),
        alpha_se: se[p..p + (t - 1) * q].chunks(q).map(<[f64]>::to_vec).collect(),
        lambda,
        sigma,
        log_likelihood: anchor_value(&opt.x, p + (t - 1) * q) - opt.value,
        iterations: opt.iterations,
        boundary,
    })
}

/// Fit the occasions 2..T block conditional on a fitted baseline.
pub fn fit_transition(
    train: &LongitudinalDataset,
    formula: &ModelFormula,
    transition: &ModelFormula,
    baseline: &BaselineBlock,
    options: &PnmtremOptions,
) -> Result<TransitionBlock> {
    let (design, zdesign) = check_formulas(train, formula, transition)?;
    fit_transition_design(&design, &zdesign, baseline, options)
}

/// Posterior mean of every subject's score given both blocks.
fn eb_scores(
    design: &Design,
    zdesign: &Design,
    baseline: &BaselineBlock,
    transition: &TransitionBlock,
    quadrature: usize,
) -> Result<Vec<f64>> {
    let trans = transition_problem(design, zdesign, baseline, quadrature)?;
    let mut theta = transition.coefficients.clone();
    theta.extend(transition.alpha.iter().flatten());
    theta.extend(&transition.lambda[1..]);
    theta.extend(transition.sigma.iter().map(|s| s.ln()));
    let eta = design.linear_predictor(&transition.coefficients)?;
    (0..design.n_subjects)
        .map(|i| {
            let mut cells = trans.base_cells[i].clone();
            for c in &trans.cells[i] {
                let tm = trans
                    .terms(&theta, &eta, c)
                    .ok_or_else(|| Error::Estimation(format!("transition cell of subject {i} is not computable")))?;
                cells.push(tm.cell);
            }
            Ok(posterior_mean(&trans.rule, &cells))
        })
        .collect()
}

/// Staged fit: baseline block, then the transition block given the baseline.
/// `transition` selects the columns `Z` multiplying the lagged response.
pub fn fit_pnmtrem(
    train: &LongitudinalDataset,
    formula: &ModelFormula,
    transition: &ModelFormula,
    options: &PnmtremOptions,
) -> Result<PnmtremFit> {
    let (design, zdesign) = check_formulas(train, formula, transition)?;
    let baseline = fit_baseline_design(&design, options)?;
    let block = fit_transition_design(&design, &zdesign, &baseline, options)?;
    let z_hat = eb_scores(&design, &zdesign, &baseline, &block, options.quadrature)?;

    let (n, k, t) = (design.n_subjects, design.n_responses(), design.n_times);
    let eta = design.linear_predictor(&block.coefficients)?;
    let mut last_marginal = Vec::with_capacity(n * k);
    let mut last_response = Vec::with_capacity(n * k);
    for i in 0..n {
        for j in 0..k {
            let r = design.row(i, t - 1, j);
            last_marginal.push(if eta[r].is_finite() { marginal(eta[r]).0 } else { f64::NAN });
            last_response.push(design.y[r]);
        }
    }
    Ok(PnmtremFit {
        formula: formula.clone(),
        transition_formula: transition.clone().with_responses(formula.responses.clone()),
        names: design.names.clone(),
        transition_names: zdesign.names.clone(),
        responses: design.responses.iter().map(|&r| train.responses()[r].clone()).collect(),
        subjects: train.subjects().to_vec(),
        times: train.times().to_vec(),
        prevalence: design.responses.iter().map(|&r| train.prevalence(r)).collect(),
        baseline,
        transition: block,
        z_hat,
        last_marginal,
        last_response,
        quadrature: options.quadrature,
    })
}

/// In-sample probabilities `P(y = 1 | z, y_prev)` on the rows of the training
/// design; occasion 1 uses the baseline block. `NaN` where covariates or the
/// lagged response are missing.
pub fn fitted_pnmtrem(fit: &PnmtremFit, train: &LongitudinalDataset, z_source: ZSource) -> Result<(Design, Vec<f64>)> {
    let design = design_matrix(train, &fit.formula)?;
    let zdesign = design_matrix(train, &fit.transition_formula)?;
    if design.names != fit.names || zdesign.names != fit.transition_names {
        return Err(Error::shape("training design does not match the fitted columns"));
    }
    let (k, t) = (design.n_responses(), design.n_times);
    if t != fit.transition.sigma.len() + 1 {
        return Err(Error::shape(format!("fit covers {} occasions, data has {t}", fit.transition.sigma.len() + 1)));
    }
    let base_eta = design.linear_predictor(&fit.baseline.coefficients)?;
    let eta = design.linear_predictor(&fit.transition.coefficients)?;
    let mut p = vec![f64::NAN; design.y.len()];
    for (i, name) in train.subjects().iter().enumerate() {
        let z = match z_source {
            ZSource::Zero => 0.0,
            ZSource::EmpiricalBayes => {
                let idx = fit
                    .subjects
                    .iter()
                    .position(|s| s == name)
                    .ok_or_else(|| Error::invalid(format!("subject {name} was not in the fitted data")))?;
                fit.z_hat[idx]
            }
        };
        for j in 0..k {
            let r0 = design.row(i, 0, j);
            if base_eta[r0].is_finite() {
                let (l, s) = (fit.baseline.lambda[j], fit.baseline.sigma);
                p[r0] = norm_cdf(base_eta[r0] * (1.0 + (l * s).powi(2)).sqrt() + l * s * z);
            }
            for tt in 1..t {
                let (row, prev) = (design.row(i, tt, j), design.row(i, tt - 1, j));
                let Some(y_prev) = design.y[prev] else { continue };
                let eta_prev = if tt == 1 { base_eta[prev] } else { eta[prev] };
                if !(eta[row].is_finite() && eta_prev.is_finite() && zdesign.covariates_complete(row)) {
                    continue;
                }
                let w: f64 = fit.transition.alpha[tt - 1].iter().enumerate().map(|(a, v)| v * zdesign.x[(row, a)]).sum();
                let delta = transition_delta(marginal(eta[row]).0, marginal(eta_prev).0, w)?.delta;
                let (l, s) = (fit.transition.lambda[j], fit.transition.sigma[tt - 1]);
                let root = (1.0 + (l * s).powi(2)).sqrt();
                p[row] = norm_cdf((delta + w * y_prev as f64) * root + l * s * z);
            }
        }
    }
    Ok((design, p))
}
