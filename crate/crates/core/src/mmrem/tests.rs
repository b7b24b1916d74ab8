use nalgebra::{dmatrix, DMatrix};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::dataset::{Covariate, CovariateKind};
use crate::numerics::{derive_seed, kronecker, rng_from_seed};

/// `E[expit(Δ + sZ)]` by a dense trapezoid on [-12, 12].
fn trapezoid_marginal(delta: f64, s: f64) -> f64 {
    let n = 4000;
    let h = 24.0 / n as f64;
    (0..=n)
        .map(|q| {
            let z = -12.0 + q as f64 * h;
            let w = if q == 0 || q == n { 0.5 } else { 1.0 };
            w * h * (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt() / (1.0 + (-(delta + s * z)).exp())
        })
        .sum()
}

fn bisect_delta(p: f64, s: f64) -> f64 {
    let (mut lo, mut hi) = (-30.0, 30.0);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if trapezoid_marginal(mid, s) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Row sums of `(AR1(γ, t)^{1/2} ⊗ Σ₂^{1/2})` restricted to the given columns of the time factor.
fn kron_loadings(gamma: f64, sigma2: &DMatrix<f64>, t: usize, cols: std::ops::Range<usize>) -> Vec<f64> {
    let k = sigma2.nrows();
    let ar = DMatrix::from_fn(t, t, |a, b| gamma.powi((a as i32 - b as i32).abs()));
    let root = |m: DMatrix<f64>| {
        let e = m.symmetric_eigen();
        let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
        &e.eigenvectors * d * e.eigenvectors.transpose()
    };
    let big = kronecker(&root(ar), &root(sigma2.clone())).unwrap();
    (0..t * k).map(|r| (cols.start * k..cols.end * k).map(|c| big[(r, c)]).sum()).collect()
}

const LEVELS: [f64; 5] = [-1.0, -0.5, 0.0, 0.5, 1.0];

/// Panel drawn from the model with a time-varying covariate `x` on five levels.
fn simulate(n: usize, t: usize, beta: &[[f64; 2]], gamma: f64, sigma2: &DMatrix<f64>, seed: u64) -> LongitudinalDataset {
    let k = beta.len();
    let a = kron_loadings(gamma, sigma2, t, 0..t);
    let delta: Vec<[f64; 5]> = (0..k)
        .map(|j| {
            let s = sigma2[(j, j)].sqrt();
            LEVELS.map(|x| bisect_delta(expit(beta[j][0] + beta[j][1] * x), s))
        })
        .collect();
    let mut rng = rng_from_seed(seed);
    let (mut xs, mut y) = (Vec::new(), Vec::new());
    for _ in 0..n {
        let z: f64 = rng.sample(StandardNormal);
        for tt in 0..t {
            let x = rng.random_range(0..LEVELS.len());
            xs.push(LEVELS[x]);
            for j in 0..k {
                let p = expit(delta[j][x] + a[tt * k + j] * z);
                y.push(Some(rng.random_bool(p) as u8));
            }
        }
    }
    LongitudinalDataset::new(
        (0..n).map(|i| format!("s{i:03}")).collect(),
        (1..=t as i64).collect(),
        (1..=k).map(|j| format!("Y{j}")).collect(),
        y,
        vec![Covariate { name: "x".into(), kind: CovariateKind::TimeVarying, derived: None, values: xs }],
    )
    .unwrap()
}

fn formula(k: usize) -> ModelFormula {
    "1 + x".parse::<ModelFormula>().unwrap().with_responses((1..=k).map(|j| format!("Y{j}")))
}

fn quick() -> MmremOptions {
    MmremOptions { std_errors: false, ..MmremOptions::default() }
}

#[test]
fn recovers_parameters() {
    let beta = [[-0.5, 1.0], [0.3, -0.7]];
    let sigma2 = dmatrix![1.0, 0.3; 0.3, 1.5];
    let ds = simulate(500, 4, &beta, 0.5, &sigma2, 11);
    let fit = fit_mmrem(&ds, &formula(2), &MmremOptions::default()).unwrap();
    assert!(fit.converged);
    let truth = [beta[0][0], beta[0][1], beta[1][0], beta[1][1]];
    for (c, &b) in truth.iter().enumerate() {
        let se = fit.std_errors[c];
        assert!(se.is_finite() && se > 0.0, "se {se}");
        assert!((fit.coefficients[c] - b).abs() < 3.0 * se, "{}: {} vs {b} (se {se})", fit.names[c], fit.coefficients[c]);
    }
    assert!(fit.gamma_se.is_finite());
    assert!((fit.gamma - 0.5).abs() < 3.0 * fit.gamma_se, "gamma {} se {}", fit.gamma, fit.gamma_se);
    assert!(!fit.boundary);
}

#[test]
fn single_response_independent_time_matches_direct_likelihood() {
    let sigma2 = dmatrix![0.8];
    let ds = simulate(40, 3, &[[0.2, -0.6]], 0.0, &sigma2, 5);
    let design = design_matrix(&ds, &model_formula(&formula(1))).unwrap();
    let beta = [0.1, -0.4];
    let got = log_likelihood(&design, &beta, 0.0, &sigma2, 40).unwrap();
    // γ = 0: every loading is √σ² and Δ uses the same scale.
    let s = sigma2[(0, 0)].sqrt();
    let d = LEVELS.map(|x| bisect_delta(expit(beta[0] + beta[1] * x), s));
    let mut want = 0.0;
    for i in 0..40 {
        let n = 8000;
        let h = 24.0 / n as f64;
        let mut li = 0.0;
        for q in 0..=n {
            let z = -12.0 + q as f64 * h;
            let w = if q == 0 || q == n { 0.5 } else { 1.0 };
            let mut l = w * h * (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
            for t in 0..3 {
                let xv = ds.value(ds.covariate("x").unwrap(), i, t);
                let x = LEVELS.iter().position(|&l| l == xv).unwrap();
                let p = expit(d[x] + s * z);
                l *= if ds.y(i, t, 0) == Some(1) { p } else { 1.0 - p };
            }
            li += l;
        }
        want += li.ln();
    }
    assert!((got - want).abs() < 1e-6 * want.abs(), "{got} vs {want}");
}

#[test]
fn gradient_matches_finite_differences() {
    let sigma2 = dmatrix![1.0, 0.2; 0.2, 0.7];
    let ds = simulate(30, 3, &[[0.1, 0.5], [-0.3, 0.4]], 0.4, &sigma2, 8);
    let design = design_matrix(&ds, &model_formula(&formula(2))).unwrap();
    let problem = Problem::new(&design, 40, None).unwrap();
    let theta = vec![0.1, 0.4, -0.2, 0.3, 0.5, 0.1, 0.2, -0.3];
    let (_, grad) = problem.evaluate(&theta, true).unwrap();
    let fd = crate::optim::fd_gradient(|th| problem.evaluate(th, false).unwrap().0, &theta, 1e-6);
    for (g, f) in grad.iter().zip(&fd) {
        assert!((g - f).abs() < 1e-5 * f.abs().max(1.0), "{grad:?} vs {fd:?}");
    }
}

fn small_fit() -> (LongitudinalDataset, MmremFit) {
    let sigma2 = dmatrix![1.2, 0.4; 0.4, 0.9];
    let ds = simulate(80, 4, &[[0.0, 0.8], [-0.4, 0.5]], 0.6, &sigma2, 21);
    let fit = fit_mmrem(&ds, &formula(2), &quick()).unwrap();
    (ds, fit)
}

#[test]
fn loadings_match_kronecker_construction() {
    let (_, fit) = small_fit();
    let st = structure(fit.gamma, &fit.sigma2, 4).unwrap();
    let want = kron_loadings(fit.gamma, &fit.sigma2, 4, 0..4);
    for (a, b) in st.loading.iter().zip(&want) {
        assert!((a - b).abs() < 1e-10);
    }
    let all = kron_loadings(fit.gamma, &fit.sigma2, 7, 0..7);
    let tail = kron_loadings(fit.gamma, &fit.sigma2, 7, 4..7);
    let a1 = loading(&fit, 3, ColumnRetention::All).unwrap();
    let a2 = loading(&fit, 3, ColumnRetention::ForecastOnly).unwrap();
    for h in 0..6 {
        assert!((a1[h] - all[8 + h]).abs() < 1e-10);
        assert!((a2[h] - tail[8 + h]).abs() < 1e-10);
    }
}

/// Posterior of one subject's score on a fine grid: (mean, mode).
fn grid_posterior(cells: &[(f64, f64, u8)]) -> (f64, f64) {
    let n = 10_001;
    let (mut num, mut den, mut best, mut arg) = (0.0, 0.0, f64::NEG_INFINITY, 0.0);
    for q in 0..n {
        let z = -10.0 + 20.0 * q as f64 / (n - 1) as f64;
        let mut lp = -0.5 * z * z;
        for &(d, a, y) in cells {
            let p = expit(d + a * z);
            lp += if y == 1 { p.ln() } else { (1.0 - p).ln() };
        }
        if lp > best {
            best = lp;
            arg = z;
        }
        num += z * lp.exp();
        den += lp.exp();
    }
    (num / den, arg)
}

#[test]
fn eb_scores_match_grid() {
    let solver = DeltaSolver::new(40).unwrap();
    let cells = [(-0.3, 0.9, 1), (0.4, 1.1, 1), (0.1, 0.7, 0), (-1.0, 1.3, 1), (0.5, 0.8, 0)];
    let (mean, mode) = grid_posterior(&cells);
    let got = eb_z(&solver, &cells, EbSummary::PosteriorMean).unwrap();
    assert!((got - mean).abs() < 1e-6, "{got} vs {mean}");
    let got = eb_z(&solver, &cells, EbSummary::PosteriorMode).unwrap();
    assert!((got - mode).abs() < 2e-3, "{got} vs {mode}");
}

#[test]
fn fitted_scores_match_grid() {
    let (ds, fit) = small_fit();
    let design = design_matrix(&ds, &fit.formula).unwrap();
    let eta = design.linear_predictor(&fit.coefficients).unwrap();
    let st = structure(fit.gamma, &fit.sigma2, 4).unwrap();
    for i in [0, 17, 79] {
        let cells: Vec<_> = design
            .cluster(i)
            .map(|r| {
                let (t, j) = ((r % 8) / 2, r % 2);
                (bisect_delta(expit(eta[r]), st.scale[j]), st.loading[t * 2 + j], design.y[r].unwrap())
            })
            .collect();
        let (mean, _) = grid_posterior(&cells);
        assert!((fit.z_hat[i] - mean).abs() < 1e-4, "{} vs {mean}", fit.z_hat[i]);
    }
}

#[test]
fn variants_one_and_two_agree_in_sample() {
    let (ds, fit) = small_fit();
    let cfg = MmremForecastConfig::default();
    let (_, p1) = fitted_mmrem(&fit, &ds, MmremVariant::Mmrem1, &cfg).unwrap();
    let (_, p2) = fitted_mmrem(&fit, &ds, MmremVariant::Mmrem2, &cfg).unwrap();
    assert_eq!(p1, p2);
}

#[test]
fn single_draw_variant_uses_seeded_score() {
    let (ds, fit) = small_fit();
    let horizon = ds.select_times(0..2).unwrap();
    let horizon = LongitudinalDataset::new(
        horizon.subjects().to_vec(),
        vec![5, 6],
        horizon.responses().to_vec(),
        (0..horizon.subjects().len() * 4).map(|_| None).collect(),
        horizon.covariates().to_vec(),
    )
    .unwrap();
    let cfg = MmremForecastConfig { draws: 1, seed: 99 };
    let (design, p3) = forecast_mmrem(&fit, &horizon, MmremVariant::Mmrem3, &cfg).unwrap();
    let (_, p4) = forecast_mmrem(&fit, &horizon, MmremVariant::Mmrem4, &cfg).unwrap();
    let a = kron_loadings(fit.gamma, &fit.sigma2, 6, 0..6);
    let eta = design.linear_predictor(&fit.coefficients).unwrap();
    for i in [0usize, 40] {
        let z: f64 = rng_from_seed(derive_seed(99, i as u64)).sample(StandardNormal);
        for h in 0..2 {
            for j in 0..2 {
                let r = design.row(i, h, j);
                let d = bisect_delta(expit(eta[r]), fit.sigma2[(j, j)].sqrt());
                assert!((p3[r] - expit(d + a[(4 + h) * 2 + j] * z)).abs() < 1e-8);
                assert!((p4[r] - expit(d)).abs() < 1e-8);
            }
        }
    }
}

#[test]
fn fixed_gamma_is_respected_and_serde_round_trips() {
    let (ds, _) = small_fit();
    let fit = fit_mmrem(&ds, &formula(2), &MmremOptions { fixed_gamma: Some(0.0), ..quick() }).unwrap();
    assert_eq!(fit.gamma, 0.0);
    let json = serde_json::to_string(&fit).unwrap();
    let back: MmremFit = serde_json::from_str(&json).unwrap();
    assert!(back.std_errors.iter().all(|v| v.is_nan()));
    assert_eq!(serde_json::to_string(&back).unwrap(), json);
    assert!(fit_mmrem(&ds, &formula(2), &MmremOptions { fixed_gamma: Some(1.0), ..quick() }).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn independent_single_response_loading_is_the_scale(sigma in 0.01f64..5.0, t in 1usize..6) {
        let st = structure(0.0, &dmatrix![sigma], t).unwrap();
        for a in st.loading {
            prop_assert!((a - sigma.sqrt()).abs() < 1e-10);
        }
    }

    #[test]
    fn cholesky_parameters_round_trip(l00 in -1.0f64..1.0, l10 in -2.0f64..2.0, l11 in -1.0f64..1.0) {
        let s = sigma_from_cholesky(&[l00, l10, l11], 2);
        let back = cholesky_params(&s);
        for (a, b) in back.iter().zip([l00, l10, l11]) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
