//! Model-independent simulation panels: latent multivariate normal draws over
//! responses and covariates with a lag-indexed correlation table, followed by
//! dichotomization of the latent responses at zero.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{Covariate, CovariateKind, LongitudinalDataset, SplitSpec};
use crate::error::{Error, Result};
use crate::numerics::{psd_project, rng_from_seed, sym_sqrt, SymmetricMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimCovariate {
    pub name: String,
    pub variance: f64,
    pub time_varying: bool,
}

/// One row per time lag (0, 1, …): correlations for
/// `[same response, same covariate, response–covariate, response–response, covariate–covariate]`.
pub type LagRow = [f64; 5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_subjects: usize,
    pub n_times: usize,
    pub responses: Vec<String>,
    /// Variances of the latent responses.
    pub response_variances: Vec<f64>,
    pub covariates: Vec<SimCovariate>,
    pub correlations: Vec<LagRow>,
    /// Largest accepted `‖C - proj(C)‖_F / ‖C‖_F` of the PSD repair.
    pub max_projection: f64,
    /// Rescale the repaired matrix back to the configured variances. Off by
    /// default: plain clipping inflates the diagonal slightly, and the
    /// covariate forecast errors it produces sit closer to published values.
    pub renormalize_diagonal: bool,
    pub split: SplitSpec,
}

impl Default for SimConfig {
    fn default() -> Self {
        let cov = |name: &str, variance: f64, time_varying: bool| SimCovariate { name: name.into(), variance, time_varying };
        Self {
            n_subjects: 500,
            n_times: 8,
            responses: vec!["Y1".into(), "Y2".into()],
            response_variances: vec![1.5, 2.5],
            covariates: vec![cov("X1", 8.0, false), cov("X2", 2.5, true), cov("X3", 15.0, false), cov("X4", 25.0, true)],
            correlations: vec![
                [1.00, 1.00, 0.80, 0.60, 0.20],
                [0.90, 0.88, 0.70, 0.55, 0.18],
                [0.80, 0.76, 0.60, 0.45, 0.16],
                [0.70, 0.64, 0.50, 0.40, 0.14],
                [0.60, 0.52, 0.40, 0.35, 0.12],
                [0.50, 0.40, 0.30, 0.30, 0.10],
                [0.40, 0.28, 0.20, 0.25, 0.08],
                [0.30, 0.16, 0.10, 0.20, 0.06],
            ],
            max_projection: 0.10,
            renormalize_diagonal: false,
            split: SplitSpec { train: (1, 4), forecast: (5, 8) },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Slot {
    Response(usize, usize),
    Varying(usize, usize),
    Invariant(usize),
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || self.n_times == 0 {
            return Err(Error::Config("simulation needs subjects and occasions".into()));
        }
        if self.responses.is_empty() || self.responses.len() != self.response_variances.len() {
            return Err(Error::Config("one variance per response required".into()));
        }
        let variances = self.response_variances.iter().chain(self.covariates.iter().map(|c| &c.variance));
        if variances.clone().any(|&v| !(v > 0.0)) {
            return Err(Error::Config("variances must be positive".into()));
        }
        if self.correlations.len() < self.n_times {
            return Err(Error::Config(format!(
                "correlation table has {} lags, {} occasions need {}",
                self.correlations.len(),
                self.n_times,
                self.n_times
            )));
        }
        if self.correlations.iter().flatten().any(|r| !(-1.0..=1.0).contains(r)) {
            return Err(Error::Config("tabled correlations must lie in [-1, 1]".into()));
        }
        if self.correlations[0][0] != 1.0 || self.correlations[0][1] != 1.0 {
            return Err(Error::Config("lag-0 autocorrelations must be 1".into()));
        }
        Ok(())
    }

    /// Latent vector layout: for each occasion the responses then the
    /// time-varying covariates; the time-invariant covariates once at the end.
    fn slots(&self) -> Vec<Slot> {
        let varying: Vec<usize> = (0..self.covariates.len()).filter(|&c| self.covariates[c].time_varying).collect();
        let mut slots = Vec::new();
        for t in 0..self.n_times {
            slots.extend((0..self.responses.len()).map(|j| Slot::Response(j, t)));
            slots.extend(varying.iter().map(|&c| Slot::Varying(c, t)));
        }
        slots.extend((0..self.covariates.len()).filter(|&c| !self.covariates[c].time_varying).map(Slot::Invariant));
        slots
    }

    fn correlation(&self, a: Slot, b: Slot) -> f64 {
        use Slot::*;
        let lag = |s: usize, t: usize| s.abs_diff(t);
        let row = |l: usize| &self.correlations[l];
        match (a, b) {
            (Response(j, s), Response(k, t)) => row(lag(s, t))[if j == k { 0 } else { 3 }],
            (Varying(c, s), Varying(d, t)) => row(lag(s, t))[if c == d { 1 } else { 4 }],
            (Response(_, s), Varying(_, t)) | (Varying(_, t), Response(_, s)) => row(lag(s, t))[2],
            (Response(..), Invariant(_)) | (Invariant(_), Response(..)) => row(0)[2],
            (Varying(..), Invariant(_)) | (Invariant(_), Varying(..)) => row(0)[4],
            (Invariant(c), Invariant(d)) => {
                if c == d {
                    1.0
                } else {
                    row(0)[4]
                }
            }
        }
    }

    fn variance(&self, s: Slot) -> f64 {
        match s {
            Slot::Response(j, _) => self.response_variances[j],
            Slot::Varying(c, _) | Slot::Invariant(c) => self.covariates[c].variance,
        }
    }
}

/// Assembled latent covariance before and after PSD repair.
#[derive(Debug, Clone)]
pub struct BuiltCovariance {
    pub raw: SymmetricMatrix<f64>,
    pub matrix: SymmetricMatrix<f64>,
    pub min_eigenvalue_before: f64,
    /// `‖raw - matrix‖_F / ‖raw‖_F`.
    pub relative_distance: f64,
}

/// Covariance of the latent vector. An indefinite table is repaired by clipping
/// negative eigenvalues to zero, optionally rescaling so the diagonal keeps the
/// configured variances; repairs moving more than `max_projection` of the
/// Frobenius norm fail.
pub fn build_covariance(config: &SimConfig) -> Result<BuiltCovariance> {
    config.validate()?;
    let slots = config.slots();
    let raw = SymmetricMatrix::from_fn(slots.len(), |a, b| {
        let (sa, sb) = (slots[a], slots[b]);
        let r = if a == b { 1.0 } else { config.correlation(sa, sb) };
        r * (config.variance(sa) * config.variance(sb)).sqrt()
    })?;
    let proj = psd_project(&raw, 0.0);
    let matrix = if proj.distance > 0.0 && config.renormalize_diagonal {
        let clipped = proj.matrix.matrix();
        let scale: Vec<f64> = (0..slots.len()).map(|a| (raw.matrix()[(a, a)] / clipped[(a, a)]).sqrt()).collect();
        SymmetricMatrix::from_fn(slots.len(), |a, b| clipped[(a, b)] * scale[a] * scale[b])?
    } else {
        proj.matrix
    };
    let relative = (matrix.matrix() - raw.matrix()).norm() / raw.matrix().norm();
    if relative > 0.0 {
        log::info!(
            "latent covariance repaired: min eigenvalue {:.4e}, relative Frobenius distance {relative:.4}",
            proj.min_eigenvalue_before
        );
    }
    if relative > config.max_projection {
        return Err(Error::Structural { relative, limit: config.max_projection });
    }
    Ok(BuiltCovariance {
        min_eigenvalue_before: proj.min_eigenvalue_before,
        relative_distance: relative,
        raw,
        matrix,
    })
}

#[derive(Debug, Clone)]
pub struct SimulatedPanel {
    pub dataset: LongitudinalDataset,
    /// Latent responses, `latent[(i * T + t) * k + j]`.
    pub latent: Vec<f64>,
}

/// Reusable generator: the covariance square root is computed once.
#[derive(Debug, Clone)]
pub struct Simulator {
    config: SimConfig,
    covariance: BuiltCovariance,
    root: DMatrix<f64>,
    slots: Vec<Slot>,
}

/// Record of how a simulated dataset was produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub config: SimConfig,
    pub seed: u64,
    pub projection_distance: f64,
    pub min_eigenvalue_before_projection: f64,
    pub version: String,
}

impl Simulator {
    pub fn new(config: SimConfig) -> Result<Self> {
        let covariance = build_covariance(&config)?;
        let root = sym_sqrt(&covariance.matrix)?;
        let slots = config.slots();
        Ok(Self { config, covariance, root, slots })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn covariance(&self) -> &BuiltCovariance {
        &self.covariance
    }

    pub fn provenance(&self, seed: u64) -> Provenance {
        Provenance {
            config: self.config.clone(),
            seed,
            projection_distance: self.covariance.relative_distance,
            min_eigenvalue_before_projection: self.covariance.min_eigenvalue_before,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    /// Latent draws for every subject, one column per subject.
    pub fn latent_draws(&self, seed: u64) -> DMatrix<f64> {
        let mut rng = rng_from_seed(seed);
        let d = self.slots.len();
        let n = self.config.n_subjects;
        let z = DMatrix::from_fn(d, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.root * z
    }

    pub fn generate(&self, seed: u64) -> Result<SimulatedPanel> {
        let cfg = &self.config;
        let (n, t, k) = (cfg.n_subjects, cfg.n_times, cfg.responses.len());
        let draws = self.latent_draws(seed);
        let mut latent = vec![0.0; n * t * k];
        let mut cov_values = vec![vec![0.0; n * t]; cfg.covariates.len()];
        for (row, slot) in self.slots.iter().enumerate() {
            for i in 0..n {
                let v = draws[(row, i)];
                match *slot {
                    Slot::Response(j, tt) => latent[(i * t + tt) * k + j] = v,
                    Slot::Varying(c, tt) => cov_values[c][i * t + tt] = v,
                    Slot::Invariant(c) => cov_values[c][i * t..(i + 1) * t].fill(v),
                }
            }
        }
        let y = latent.iter().map(|&v| Some((v >= 0.0) as u8)).collect();
        let covariates = cfg
            .covariates
            .iter()
            .zip(cov_values)
            .map(|(c, values)| Covariate {
                name: c.name.clone(),
                kind: if c.time_varying { CovariateKind::TimeVarying } else { CovariateKind::TimeInvariant },
                derived: None,
                values,
            })
            .collect();
        let width = n.to_string().len();
        let dataset = LongitudinalDataset::new(
            (1..=n).map(|i| format!("{i:0width$}")).collect(),
            (1..=t as i64).collect(),
            cfg.responses.clone(),
            y,
            covariates,
        )?;
        Ok(SimulatedPanel { dataset, latent })
    }
}

/// One-shot generation.
pub fn generate(config: &SimConfig, seed: u64) -> Result<SimulatedPanel> {
    Simulator::new(config.clone())?.generate(seed)
}

/// Sample covariance of column draws (rows are variables).
pub fn sample_covariance(draws: &DMatrix<f64>) -> DMatrix<f64> {
    let n = draws.ncols() as f64;
    let mean: DVector<f64> = draws.column_mean();
    let centred = draws - &mean * DVector::from_element(draws.ncols(), 1.0).transpose();
    &centred * centred.transpose() / (n - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn zeroed_families_give_diagonal() {
        let mut cfg = SimConfig::default();
        for (lag, row) in cfg.correlations.iter_mut().enumerate() {
            *row = if lag == 0 { [1.0, 1.0, 0.0, 0.0, 0.0] } else { [0.0; 5] };
        }
        let built = build_covariance(&cfg).unwrap();
        assert_eq!(built.relative_distance, 0.0);
        let m = built.matrix.matrix();
        let slots = cfg.slots();
        for a in 0..m.nrows() {
            for b in 0..m.ncols() {
                let expect = if a == b { cfg.variance(slots[a]) } else { 0.0 };
                assert_eq!(m[(a, b)], expect);
            }
        }
    }

    #[test]
    fn tabled_entries() {
        let cfg = SimConfig::default();
        let built = build_covariance(&cfg).unwrap();
        let slots = cfg.slots();
        let idx = |s: Slot| slots.iter().position(|&x| x == s).unwrap();
        let raw = built.raw.matrix();
        let y1 = |t| idx(Slot::Response(0, t));
        assert!((raw[(y1(3), y1(2))] / 1.5 - 0.90).abs() < 1e-15);
        let c12 = raw[(y1(3), idx(Slot::Response(1, 3)))];
        assert!((c12 - 0.6 * (1.5f64 * 2.5).sqrt()).abs() < 1e-12);
        assert!((c12 - 1.162).abs() < 1e-3);
        // lag-2 cross covariate–response entry is symmetric in time order
        let x2 = |t| idx(Slot::Varying(1, t));
        assert_eq!(raw[(y1(1), x2(3))], raw[(y1(3), x2(1))]);
        assert!((raw[(y1(1), x2(3))] - 0.6 * (1.5f64 * 2.5).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn default_table_needs_repair_within_limit() {
        let built = build_covariance(&SimConfig::default()).unwrap();
        assert!(built.min_eigenvalue_before < 0.0);
        assert!(built.relative_distance > 0.05 && built.relative_distance < 0.10, "{}", built.relative_distance);
        assert!(built.matrix.min_eigenvalue() > -1e-8);
        // clipping alone inflates the diagonal; renormalizing restores it
        let n = built.raw.matrix().nrows();
        let (d, d0) = (built.matrix.matrix().diagonal(), built.raw.matrix().diagonal());
        assert!((0..n).all(|a| d[a] >= d0[a] - 1e-12) && (0..n).any(|a| d[a] > d0[a]));
        let kept = build_covariance(&SimConfig { renormalize_diagonal: true, ..SimConfig::default() }).unwrap();
        assert!(kept.matrix.min_eigenvalue() > -1e-8);
        for a in 0..n {
            assert!((kept.matrix.matrix()[(a, a)] - kept.raw.matrix()[(a, a)]).abs() < 1e-12);
        }
        let strict = SimConfig { max_projection: 0.05, ..SimConfig::default() };
        assert!(matches!(build_covariance(&strict), Err(Error::Structural { .. })));
    }

    #[test]
    fn deterministic_under_seed() {
        let sim = Simulator::new(SimConfig::default()).unwrap();
        let a = sim.generate(99).unwrap();
        let b = sim.generate(99).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.latent, b.latent);
        assert_ne!(sim.generate(100).unwrap().latent, a.latent);
        assert_eq!((a.dataset.n_subjects(), a.dataset.n_times(), a.dataset.n_responses()), (500, 8, 2));
    }

    #[test]
    fn prevalence_and_dependence() {
        let sim = Simulator::new(SimConfig::default()).unwrap();
        let mut prevalence = [0.0; 2];
        for rep in 0..100 {
            let panel = sim.generate(crate::numerics::derive_seed(1, rep)).unwrap();
            let ds = &panel.dataset;
            for (j, p) in prevalence.iter_mut().enumerate() {
                *p += ds.prevalence(j) / 100.0;
            }
            let t = 2;
            let y1: Vec<f64> = (0..500).map(|i| ds.y(i, t, 0).unwrap() as f64).collect();
            let y2: Vec<f64> = (0..500).map(|i| ds.y(i, t, 1).unwrap() as f64).collect();
            assert!(pearson(&y1, &y2) > 0.0);
        }
        for p in prevalence {
            assert!((p - 0.5).abs() < 0.03, "{p}");
        }
    }

    #[test]
    fn lag_one_autocorrelation() {
        let panel = generate(&SimConfig::default(), 4).unwrap();
        let ds = &panel.dataset;
        let (mut a, mut b, mut ya, mut yb) = (vec![], vec![], vec![], vec![]);
        for i in 0..500 {
            for t in 1..8 {
                a.push(panel.latent[(i * 8 + t) * 2]);
                b.push(panel.latent[(i * 8 + t - 1) * 2]);
                ya.push(ds.y(i, t, 0).unwrap() as f64);
                yb.push(ds.y(i, t - 1, 0).unwrap() as f64);
            }
        }
        let latent_r = pearson(&a, &b);
        assert!((latent_r - 0.9).abs() < 0.05, "{latent_r}");
        let binary_r = pearson(&ya, &yb);
        assert!(binary_r < 0.9 && binary_r < latent_r);
    }

    #[test]
    fn sample_covariance_converges() {
        let sim = Simulator::new(SimConfig::default()).unwrap();
        let draws: Vec<DMatrix<f64>> = (0..100).map(|r| sim.latent_draws(r)).collect();
        let d = draws[0].nrows();
        let all = DMatrix::from_fn(d, 50_000, |a, c| draws[c / 500][(a, c % 500)]);
        let s = sample_covariance(&all);
        let target = sim.covariance().matrix.matrix();
        let rel = (&s - target).norm() / target.norm();
        assert!(rel < 0.1, "{rel}");
    }

    #[test]
    fn invariant_covariates_constant() {
        let panel = generate(&SimConfig { n_subjects: 20, ..SimConfig::default() }, 3).unwrap();
        let x1 = panel.dataset.covariate("X1").unwrap();
        assert_eq!(x1.kind, CovariateKind::TimeInvariant);
        for i in 0..20 {
            assert!(x1.values[i * 8..(i + 1) * 8].windows(2).all(|w| w[0] == w[1]));
        }
    }
}
