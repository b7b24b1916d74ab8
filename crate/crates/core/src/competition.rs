//! Forecasting competition: simulate (or load) a panel per replication,
//! forecast the time-varying covariates, fit every configured model on the
//! training window, forecast the holdout and score. The pieces are public so
//! the CLI can run the same pipeline one stage at a time.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accuracy::{aggregate, naive_scales, AccuracyReport, AggregateReport, Measure, Window};
use crate::covforecast::{fit_tm, fitted_tm, forecast_tm};
use crate::dataset::{load_csv, split, CovariateKind, Design, LongitudinalDataset, ModelFormula, Schema, SplitSpec};
use crate::error::{Error, Result};
use crate::gee::{fit_gee, CorrKind, GeeFit, GeeKind, GeeOptions};
use crate::mmrem::{fit_mmrem, fitted_mmrem, forecast_mmrem, MmremFit, MmremForecastConfig, MmremOptions, MmremVariant};
use crate::numerics::derive_seed;
use crate::pnmtrem::{
    fit_pnmtrem, fitted_pnmtrem, forecast_pnmtrem, PnmtremFit, PnmtremForecastConfig, PnmtremOptions, PnmtremVariant,
};
use crate::simgen::{SimConfig, Simulator};

/// Seed streams within a replication.
const STREAM_DATA: u64 = 0;
const STREAM_MMREM: u64 = 1;
const STREAM_PNMTREM: u64 = 2;

/// One competing forecaster. Written in configs and reports by its label,
/// e.g. `UMM(Uns)`, `MMREM2`, `PNMTREM1`, `PNMTREM[zero,observed]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelSpec {
    Umm(CorrKind),
    Mmm1(CorrKind),
    Mmm2(CorrKind),
    Mmrem(MmremVariant),
    Pnmtrem(PnmtremVariant),
}

fn corr_label(c: CorrKind) -> &'static str {
    match c {
        CorrKind::Independence => "Ind",
        CorrKind::Exchangeable => "Exch",
        CorrKind::Ar1 => "AR1",
        CorrKind::Unstructured => "Uns",
    }
}

fn parse_corr(s: &str) -> Option<CorrKind> {
    match s.to_ascii_lowercase().as_str() {
        "ind" | "independence" => Some(CorrKind::Independence),
        "exch" | "exchangeable" => Some(CorrKind::Exchangeable),
        "ar1" => Some(CorrKind::Ar1),
        "uns" | "unstructured" => Some(CorrKind::Unstructured),
        _ => None,
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelSpec::Umm(c) => write!(f, "UMM({})", corr_label(*c)),
            ModelSpec::Mmm1(c) => write!(f, "MMM1({})", corr_label(*c)),
            ModelSpec::Mmm2(c) => write!(f, "MMM2({})", corr_label(*c)),
            ModelSpec::Mmrem(v) => f.write_str(v.label()),
            ModelSpec::Pnmtrem(v) => f.write_str(&v.label()),
        }
    }
}

impl FromStr for ModelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let upper = s.to_ascii_uppercase();
        let (family, corr) = match upper.find('(') {
            Some(open) if upper.ends_with(')') => (&upper[..open], Some(&s[open + 1..s.len() - 1])),
            _ => (upper.as_str(), None),
        };
        let corr = match corr {
            None => CorrKind::Unstructured,
            Some(c) => parse_corr(c.trim()).ok_or_else(|| Error::Config(format!("unknown working correlation in {s:?}")))?,
        };
        match family.trim() {
            "UMM" => return Ok(ModelSpec::Umm(corr)),
            "MMM1" => return Ok(ModelSpec::Mmm1(corr)),
            "MMM2" => return Ok(ModelSpec::Mmm2(corr)),
            _ => {}
        }
        if let Some(v) = MmremVariant::ALL.iter().find(|v| v.label() == upper) {
            return Ok(ModelSpec::Mmrem(*v));
        }
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        if let Some(v) = PnmtremVariant::ALL.iter().find(|v| v.label().eq_ignore_ascii_case(&compact)) {
            return Ok(ModelSpec::Pnmtrem(*v));
        }
        Err(Error::Config(format!("unknown model {s:?}")))
    }
}

impl Serialize for ModelSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModelSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

impl ModelSpec {
    /// Models sharing a key share one fit.
    pub fn family_key(&self) -> String {
        match self {
            ModelSpec::Mmrem(_) => "MMREM".into(),
            ModelSpec::Pnmtrem(_) => "PNMTREM".into(),
            gee => gee.to_string(),
        }
    }
}

/// Sort by label and drop duplicates, so reports do not depend on config order.
pub fn canonical_models(models: &[ModelSpec]) -> Vec<ModelSpec> {
    let mut out = models.to_vec();
    out.sort_by_key(|m| m.to_string());
    out.dedup();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Fresh panel per replication.
    Simulate(SimConfig),
    /// One long-format panel, reused by every replication.
    Csv {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        schema: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompetitionConfig {
    pub data: DataSource,
    /// Defaults to the simulation config's split.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitSpec>,
    /// Marginal formula, e.g. `1 + X1 + X2 + X3 + X4`.
    pub formula: String,
    /// Columns multiplying the lagged response in PNMTREM.
    pub transition_formula: String,
    /// Per-response coefficients in the PNMTREM marginal layer.
    pub pnmtrem_per_response: bool,
    pub models: Vec<ModelSpec>,
    pub gee: GeeOptions,
    pub mmrem: MmremOptions,
    pub pnmtrem: PnmtremOptions,
    /// `K` simulated scores per subject for MMREM3.
    pub draws: usize,
    pub ets_min_times: usize,
    pub cutoffs: Option<Vec<f64>>,
    /// Transition order used to forecast time-varying covariates.
    pub covariate_order: usize,
    /// Score TM(1) and TM(2) for every time-varying covariate.
    pub covariate_report: bool,
    pub replications: usize,
    pub seed: u64,
    /// Worker threads; `None` uses all cores.
    pub jobs: Option<usize>,
    /// Largest tolerated share of failed replications per model.
    pub failure_limit: f64,
}

impl Default for CompetitionConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Simulate(SimConfig::default()),
            split: None,
            formula: "1 + X1 + X2 + X3 + X4".into(),
            transition_formula: "1".into(),
            pnmtrem_per_response: true,
            models: vec![
                ModelSpec::Umm(CorrKind::Unstructured),
                ModelSpec::Mmm1(CorrKind::Unstructured),
                ModelSpec::Mmrem(MmremVariant::Mmrem2),
                ModelSpec::Mmrem(MmremVariant::Mmrem4),
                ModelSpec::Pnmtrem(PnmtremVariant::ALL[0]),
                ModelSpec::Pnmtrem(PnmtremVariant::ALL[1]),
            ],
            gee: GeeOptions::default(),
            mmrem: MmremOptions::default(),
            pnmtrem: PnmtremOptions::default(),
            draws: 150,
            ets_min_times: 8,
            cutoffs: None,
            covariate_order: 1,
            covariate_report: true,
            replications: 100,
            seed: 0,
            jobs: None,
            failure_limit: 0.2,
        }
    }
}

impl CompetitionConfig {
    /// Read a JSON config; relative data paths resolve against its directory.
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let DataSource::Csv { path: data, schema } = &mut cfg.data {
            let base = path.parent().unwrap_or(Path::new("."));
            if data.is_relative() {
                *data = base.join(&*data);
            }
            if let Some(s) = schema.as_mut().filter(|s| s.is_relative()) {
                *s = base.join(&*s);
            }
        }
        Ok(cfg)
    }

    pub fn split_spec(&self) -> Result<SplitSpec> {
        match (&self.split, &self.data) {
            (Some(s), _) => Ok(*s),
            (None, DataSource::Simulate(sim)) => Ok(sim.split),
            (None, DataSource::Csv { .. }) => Err(Error::Config("a CSV data source needs an explicit split".into())),
        }
    }

    pub fn marginal_formula(&self) -> Result<ModelFormula> {
        self.formula.parse().map_err(|e| Error::Config(format!("formula: {e}")))
    }

    pub fn pnmtrem_formulas(&self) -> Result<(ModelFormula, ModelFormula)> {
        let transition = self.transition_formula.parse().map_err(|e| Error::Config(format!("transition formula: {e}")))?;
        Ok((self.marginal_formula()?.per_response(self.pnmtrem_per_response), transition))
    }

    pub fn validate(&self) -> Result<()> {
        self.marginal_formula()?;
        self.pnmtrem_formulas()?;
        let split = self.split_spec()?;
        SplitSpec::new(split.train, split.forecast).map_err(|e| Error::Config(e.to_string()))?;
        if self.replications == 0 {
            return Err(Error::Config("at least one replication is required".into()));
        }
        if self.draws == 0 {
            return Err(Error::Config("MMREM3 needs at least one draw".into()));
        }
        if !(1..=2).contains(&self.covariate_order) {
            return Err(Error::Config(format!("covariate order {} (1 or 2)", self.covariate_order)));
        }
        if !(0.0..=1.0).contains(&self.failure_limit) {
            return Err(Error::Config("failure limit must lie in [0, 1]".into()));
        }
        if self.jobs == Some(0) {
            return Err(Error::Config("jobs must be positive".into()));
        }
        if let DataSource::Simulate(sim) = &self.data {
            sim.validate()?;
            if split.train.0 < 1 || split.forecast.1 > sim.n_times as i64 {
                return Err(Error::Config(format!("split does not fit {} simulated occasions", sim.n_times)));
            }
        }
        Ok(())
    }
}

/// Where replication panels come from.
pub enum Source {
    Simulated(Box<Simulator>),
    Fixed(LongitudinalDataset),
}

impl Source {
    pub fn new(cfg: &CompetitionConfig) -> Result<Self> {
        match &cfg.data {
            DataSource::Simulate(sim) => Ok(Source::Simulated(Box::new(Simulator::new(sim.clone())?))),
            DataSource::Csv { path, schema } => {
                let schema = schema.as_deref().map(Schema::from_json_file).transpose()?;
                if !path.exists() {
                    return Err(Error::MissingArtifact(path.clone()));
                }
                Ok(Source::Fixed(load_csv(path, schema.as_ref())?))
            }
        }
    }

    fn projection_distance(&self) -> Option<f64> {
        match self {
            Source::Simulated(sim) => Some(sim.covariance().relative_distance),
            Source::Fixed(_) => None,
        }
    }
}

pub fn replication_seed(master: u64, rep: usize) -> u64 {
    derive_seed(master, rep as u64)
}

/// Panels of one replication.
#[derive(Debug, Clone)]
pub struct ReplicationData {
    pub seed: u64,
    pub train: LongitudinalDataset,
    /// True holdout panel.
    pub holdout: LongitudinalDataset,
    /// Holdout with time-varying covariates replaced by their forecasts.
    /// Responses are kept; only the `observed` history mode reads them.
    pub horizon: LongitudinalDataset,
}

/// Seed of the simulated panel of the replication with seed `seed`.
pub fn simulation_seed(seed: u64) -> u64 {
    derive_seed(seed, STREAM_DATA)
}

pub fn prepare_replication(source: &Source, cfg: &CompetitionConfig, seed: u64) -> Result<ReplicationData> {
    let spec = cfg.split_spec()?;
    let full = match source {
        Source::Simulated(sim) => sim.generate(simulation_seed(seed))?.dataset,
        Source::Fixed(ds) => ds.clone(),
    };
    let (train, holdout) = split(&full, &spec)?;
    let mut horizon = holdout.clone();
    for c in train.covariates().iter().filter(|c| c.kind == CovariateKind::TimeVarying) {
        let fit = fit_tm(&train, &c.name, cfg.covariate_order)?;
        horizon = horizon.with_covariate_values(&c.name, forecast_tm(&fit, &train, spec.horizon())?)?;
    }
    Ok(ReplicationData { seed, train, holdout, horizon })
}

/// Estimated model of one family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum FittedModel {
    /// UMM holds one fit per response.
    Gee { fits: Vec<GeeFit> },
    Mmrem { fit: Box<MmremFit> },
    Pnmtrem { fit: Box<PnmtremFit> },
}

pub fn fit_model(spec: ModelSpec, train: &LongitudinalDataset, cfg: &CompetitionConfig) -> Result<FittedModel> {
    let formula = cfg.marginal_formula()?;
    let gee = |corr, kind| fit_gee(train, &formula, corr, kind, &cfg.gee);
    Ok(match spec {
        ModelSpec::Umm(corr) => {
            let responses = if formula.responses.is_empty() { train.responses().to_vec() } else { formula.responses.clone() };
            let fits = responses
                .into_iter()
                .map(|r| fit_gee(train, &formula.clone().with_responses([r]), corr, GeeKind::Umm, &cfg.gee))
                .collect::<Result<_>>()?;
            FittedModel::Gee { fits }
        }
        ModelSpec::Mmm1(corr) => FittedModel::Gee { fits: vec![gee(corr, GeeKind::Mmm1)?] },
        ModelSpec::Mmm2(corr) => FittedModel::Gee { fits: vec![gee(corr, GeeKind::Mmm2)?] },
        ModelSpec::Mmrem(_) => FittedModel::Mmrem { fit: Box::new(fit_mmrem(train, &formula, &cfg.mmrem)?) },
        ModelSpec::Pnmtrem(_) => {
            let (marginal, transition) = cfg.pnmtrem_formulas()?;
            FittedModel::Pnmtrem { fit: Box::new(fit_pnmtrem(train, &marginal, &transition, &cfg.pnmtrem)?) }
        }
    })
}

/// One scored probability.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityRow {
    pub subject: String,
    pub time: i64,
    pub response: String,
    pub y: Option<u8>,
    pub p: f64,
}

fn rows_of(ds: &LongitudinalDataset, design: &Design, p: &[f64], out: &mut Vec<ProbabilityRow>) {
    for i in 0..design.n_subjects {
        for t in 0..design.n_times {
            for (j, &r) in design.responses.iter().enumerate() {
                let row = design.row(i, t, j);
                out.push(ProbabilityRow {
                    subject: ds.subjects()[i].clone(),
                    time: ds.times()[t],
                    response: ds.responses()[r].clone(),
                    y: design.y[row],
                    p: p[row],
                });
            }
        }
    }
}

/// In-sample probabilities on the training window followed by forecasts for the horizon.
pub fn predict_model(spec: ModelSpec, fitted: &FittedModel, data: &ReplicationData, cfg: &CompetitionConfig) -> Result<Vec<ProbabilityRow>> {
    let mut rows = Vec::new();
    match (spec, fitted) {
        (ModelSpec::Umm(_) | ModelSpec::Mmm1(_) | ModelSpec::Mmm2(_), FittedModel::Gee { fits }) => {
            let mut ahead = Vec::new();
            for fit in fits {
                let (d, p) = fit.predict(&data.train)?;
                rows_of(&data.train, &d, &p, &mut rows);
                let (d, p) = fit.predict(&data.horizon)?;
                rows_of(&data.horizon, &d, &p, &mut ahead);
            }
            rows.extend(ahead);
        }
        (ModelSpec::Mmrem(variant), FittedModel::Mmrem { fit }) => {
            let mc = MmremForecastConfig { draws: cfg.draws, seed: derive_seed(data.seed, STREAM_MMREM) };
            let (d, p) = fitted_mmrem(fit, &data.train, variant, &mc)?;
            rows_of(&data.train, &d, &p, &mut rows);
            let (d, p) = forecast_mmrem(fit, &data.horizon, variant, &mc)?;
            rows_of(&data.horizon, &d, &p, &mut rows);
        }
        (ModelSpec::Pnmtrem(variant), FittedModel::Pnmtrem { fit }) => {
            let (d, p) = fitted_pnmtrem(fit, &data.train, variant.z_source)?;
            rows_of(&data.train, &d, &p, &mut rows);
            let pc = PnmtremForecastConfig {
                variant,
                seed: derive_seed(data.seed, STREAM_PNMTREM),
                cutoffs: cfg.cutoffs.clone(),
                ets_min_times: cfg.ets_min_times,
            };
            let out = forecast_pnmtrem(fit, &data.horizon, &pc)?;
            rows_of(&data.horizon, &out.design, &out.probabilities, &mut rows);
        }
        (spec, _) => return Err(Error::Config(format!("fitted model does not belong to {spec}"))),
    }
    Ok(rows)
}

/// Response windows: the training window pooled, then each forecast occasion and the pooled horizon.
pub fn response_windows(split: &SplitSpec) -> Vec<Window> {
    let mut w = vec![Window::range(split.train.0, split.train.1)];
    w.extend(Window::per_time_and_pooled(split.forecast.0, split.forecast.1));
    w
}

/// Score a model's probabilities per response. Cells without a probability are skipped.
pub fn score_rows(model: &str, rows: &[ProbabilityRow], split: &SplitSpec) -> Result<AccuracyReport> {
    let train: Vec<i64> = (split.train.0..=split.train.1).collect();
    let ahead: Vec<i64> = (split.forecast.0..=split.forecast.1).collect();
    let mut times: Vec<i64> = rows.iter().map(|r| r.time).collect();
    times.sort_unstable();
    times.dedup();
    let expected: Vec<i64> = train.iter().chain(&ahead).copied().collect();
    if times != expected {
        return Err(Error::shape(format!("{model}: probabilities cover occasions {times:?}, split expects {expected:?}")));
    }
    let mut targets: Vec<&str> = Vec::new();
    for r in rows {
        if !targets.contains(&r.response.as_str()) {
            targets.push(&r.response);
        }
    }
    let windows = response_windows(split);
    let mut report = AccuracyReport::default();
    for target in targets {
        let cells: Vec<&ProbabilityRow> = rows.iter().filter(|r| r.response == target).collect();
        let t: Vec<i64> = cells.iter().map(|r| r.time).collect();
        let y: Vec<Option<u8>> = cells.iter().map(|r| r.y.filter(|_| r.p.is_finite())).collect();
        let p: Vec<f64> = cells.iter().map(|r| r.p).collect();
        report.score_binary(model, target, &windows, &t, &y, &p)?;
    }
    Ok(report)
}

/// Score every model of a probability file as one replication.
pub fn evaluate_probabilities(models: &[(String, Vec<ProbabilityRow>)], split: &SplitSpec) -> Result<AggregateReport> {
    let mut report = AccuracyReport::default();
    for (model, rows) in models {
        report.extend(score_rows(model, rows, split)?);
    }
    aggregate(&[report])
}

const PROBABILITY_HEADER: [&str; 6] = ["model", "subject", "time", "response", "y", "p"];

/// Long-format probabilities; values are written in shortest round-trip form.
pub fn write_probabilities(path: &Path, models: &[(String, Vec<ProbabilityRow>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(PROBABILITY_HEADER)?;
    for (model, rows) in models {
        for r in rows {
            let y = r.y.map_or("NA".to_string(), |v| v.to_string());
            let p = if r.p.is_nan() { "NA".to_string() } else { r.p.to_string() };
            w.write_record([model.as_str(), &r.subject, &r.time.to_string(), &r.response, &y, &p])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`write_probabilities`]; models keep their order of first appearance.
pub fn read_probabilities(path: &Path) -> Result<Vec<(String, Vec<ProbabilityRow>)>> {
    let file = std::fs::File::open(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
    let mut reader = csv::Reader::from_reader(file);
    if reader.headers()?.iter().ne(PROBABILITY_HEADER) {
        return Err(Error::Schema(format!("{}: expected columns {}", path.display(), PROBABILITY_HEADER.join(","))));
    }
    let mut out: Vec<(String, Vec<ProbabilityRow>)> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let bad = |what: &str| Error::Parse { line: line + 2, message: format!("cannot parse {what}") };
        let time = record[2].parse().map_err(|_| bad("time"))?;
        let y = match &record[4] {
            "NA" => None,
            "0" => Some(0),
            "1" => Some(1),
            _ => return Err(bad("y")),
        };
        let p = match &record[5] {
            "NA" => f64::NAN,
            v => v.parse().map_err(|_| bad("p"))?,
        };
        let row = ProbabilityRow { subject: record[1].to_string(), time, response: record[3].to_string(), y, p };
        match out.iter_mut().find(|(m, _)| m == &record[0]) {
            Some((_, rows)) => rows.push(row),
            None => out.push((record[0].to_string(), vec![row])),
        }
    }
    Ok(out)
}

/// File stem for a family's fit artifact, e.g. `umm-uns`.
pub fn artifact_stem(key: &str) -> String {
    let mut out = String::new();
    for c in key.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('-') {
            out.push('-');
        }
    }
    out.trim_matches('-').to_string()
}

pub fn transition_label(order: usize) -> String {
    format!("TM({order})")
}

/// MAE and MASE of TM(1) and TM(2) for every time-varying covariate: the
/// in-sample window from the first fitted occasion, each forecast occasion and
/// the pooled horizon. `NaN` MASE when a subject's training history is constant.
pub fn score_covariates(data: &ReplicationData, split: &SplitSpec) -> Vec<(String, Unit)> {
    let (train, holdout) = (&data.train, &data.holdout);
    let (n, tt, m) = (train.n_subjects(), train.n_times(), holdout.n_times());
    let varying: Vec<_> = train.covariates().iter().filter(|c| c.kind == CovariateKind::TimeVarying).collect();
    let mut out = Vec::new();
    for order in 1..=2usize {
        if tt < order + 1 {
            continue;
        }
        let label = transition_label(order);
        let result = (|| {
            let mut report = AccuracyReport::default();
            for c in &varying {
                let fit = fit_tm(train, &c.name, order)?;
                let fitted = fitted_tm(&fit, train)?;
                let ahead = forecast_tm(&fit, train, m)?;
                let truth = &holdout.covariate(&c.name).ok_or_else(|| Error::shape("holdout lacks a covariate"))?.values;
                let histories: Vec<Vec<f64>> = (0..n).map(|i| c.values[i * tt..(i + 1) * tt].to_vec()).collect();
                let scales = naive_scales(&histories, train.subjects()).ok();
                let (mut times, mut x, mut xhat, mut scale) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
                for i in 0..n {
                    for t in order..tt {
                        times.push(train.times()[t]);
                        x.push(c.values[i * tt + t]);
                        xhat.push(fitted[i * tt + t]);
                        scale.push(scales.as_ref().map_or(f64::NAN, |s| s[i]));
                    }
                    for h in 0..m {
                        times.push(holdout.times()[h]);
                        x.push(truth[i * m + h]);
                        xhat.push(ahead[i * m + h]);
                        scale.push(scales.as_ref().map_or(f64::NAN, |s| s[i]));
                    }
                }
                let mut windows = vec![Window::range(split.train.0 + order as i64, split.train.1)];
                windows.extend(Window::per_time_and_pooled(split.forecast.0, split.forecast.1));
                for w in &windows {
                    let one = std::slice::from_ref(w);
                    if scales.is_some() {
                        report.score_continuous(&label, &c.name, one, &times, &x, &xhat, Some(&scale))?;
                    } else {
                        report.score_continuous(&label, &c.name, one, &times, &x, &xhat, None)?;
                        report.push(&label, &c.name, &w.label, Measure::Mase, f64::NAN);
                    }
                }
            }
            Ok(report)
        })();
        out.push((label, result.map_err(|e: Error| e.to_string())));
    }
    out
}

/// A model's scores, or why it failed.
pub type Unit = std::result::Result<AccuracyReport, String>;

/// Everything one replication produced.
#[derive(Debug)]
pub struct ReplicationOutcome {
    pub seed: u64,
    pub responses: Vec<(String, Unit)>,
    pub covariates: Vec<(String, Unit)>,
    /// Wall-clock seconds per family fit and per model forecast.
    pub fit_seconds: Vec<(String, f64)>,
    pub forecast_seconds: Vec<(String, f64)>,
}

/// Fit each family once, then forecast and score every model in canonical order.
pub fn run_replication(source: &Source, cfg: &CompetitionConfig, seed: u64) -> Result<ReplicationOutcome> {
    let split = cfg.split_spec()?;
    let data = prepare_replication(source, cfg, seed)?;
    let covariates = if cfg.covariate_report { score_covariates(&data, &split) } else { Vec::new() };
    let mut fits: BTreeMap<String, std::result::Result<FittedModel, String>> = BTreeMap::new();
    let (mut fit_seconds, mut forecast_seconds) = (Vec::new(), Vec::new());
    let mut responses = Vec::new();
    for spec in canonical_models(&cfg.models) {
        let label = spec.to_string();
        let key = spec.family_key();
        if !fits.contains_key(&key) {
            let start = Instant::now();
            let fit = fit_model(spec, &data.train, cfg).map_err(|e| e.to_string());
            fit_seconds.push((key.clone(), start.elapsed().as_secs_f64()));
            fits.insert(key.clone(), fit);
        }
        let start = Instant::now();
        let scored = match &fits[&key] {
            Ok(fit) => predict_model(spec, fit, &data, cfg)
                .and_then(|rows| score_rows(&label, &rows, &split))
                .map_err(|e| e.to_string()),
            Err(msg) => Err(msg.clone()),
        };
        forecast_seconds.push((label.clone(), start.elapsed().as_secs_f64()));
        if let Err(e) = &scored {
            log::warn!("replication seed {seed}: {label} failed: {e}");
        }
        responses.push((label, scored));
    }
    Ok(ReplicationOutcome { seed, responses, covariates, fit_seconds, forecast_seconds })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub model: String,
    pub replication: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompetitionProvenance {
    pub version: String,
    pub master_seed: u64,
    pub replication_seeds: Vec<u64>,
    /// Relative Frobenius distance of the simulation covariance's PSD repair.
    pub projection_distance: Option<f64>,
    pub config: CompetitionConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    /// Mean seconds per replication for each family fit.
    pub fit: BTreeMap<String, f64>,
    /// Mean seconds per replication for each model's forecasts and scoring.
    pub forecast: BTreeMap<String, f64>,
    pub total_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct CompetitionResult {
    pub responses: Option<AggregateReport>,
    pub covariates: Option<AggregateReport>,
    pub failures: Vec<FailureRecord>,
    pub timings: Timings,
    pub provenance: CompetitionProvenance,
}

/// Stack per-replication reports unit by unit; a failed unit contributes `NaN`
/// in every cell the unit produces elsewhere.
fn combine(per_rep: Vec<Vec<(String, Unit)>>, failures: &mut Vec<FailureRecord>) -> Result<Option<AggregateReport>> {
    let Some(first) = per_rep.first() else { return Ok(None) };
    let units: Vec<String> = first.iter().map(|(u, _)| u.clone()).collect();
    let mut templates: Vec<Option<AccuracyReport>> = vec![None; units.len()];
    for rep in &per_rep {
        for (u, (_, r)) in rep.iter().enumerate() {
            if let (None, Ok(report)) = (&templates[u], r) {
                templates[u] = Some(report.clone());
            }
        }
    }
    let mut reports = Vec::with_capacity(per_rep.len());
    for (rep, units_out) in per_rep.into_iter().enumerate() {
        let mut report = AccuracyReport::default();
        for (u, (name, r)) in units_out.into_iter().enumerate() {
            match r {
                Ok(r) => report.extend(r),
                Err(e) => {
                    failures.push(FailureRecord { model: name, replication: rep, message: e });
                    if let Some(t) = &templates[u] {
                        report.cells.extend(t.cells.iter().map(|(k, _)| (k.clone(), f64::NAN)));
                    }
                }
            }
        }
        reports.push(report);
    }
    if reports.iter().all(|r| r.cells.is_empty()) {
        return Ok(None);
    }
    aggregate(&reports).map(Some)
}

fn check_failures(failures: &[FailureRecord], total: usize, limit: f64) -> Result<()> {
    let mut counts: BTreeMap<&str, Vec<&FailureRecord>> = BTreeMap::new();
    for f in failures {
        counts.entry(&f.model).or_default().push(f);
    }
    for (model, list) in counts {
        if list.len() as f64 > limit * total as f64 {
            let diagnostics = list
                .iter()
                .take(3)
                .map(|f| format!("replication {}: {}", f.replication, f.message))
                .collect::<Vec<_>>()
                .join("; ");
            return Err(Error::TooManyFailures { model: model.into(), failed: list.len(), total, diagnostics });
        }
    }
    Ok(())
}

fn mean_by_key(entries: impl Iterator<Item = (String, f64)>, reps: usize) -> BTreeMap<String, f64> {
    let mut out: BTreeMap<String, f64> = BTreeMap::new();
    for (k, v) in entries {
        *out.entry(k).or_default() += v / reps as f64;
    }
    out
}

/// Run every replication (in parallel, results in replication order) and aggregate.
pub fn run_competition(cfg: &CompetitionConfig) -> Result<CompetitionResult> {
    cfg.validate()?;
    let start = Instant::now();
    let source = Source::new(cfg)?;
    let seeds: Vec<u64> = (0..cfg.replications).map(|r| replication_seed(cfg.seed, r)).collect();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cfg.jobs {
        builder = builder.num_threads(j);
    }
    let pool = builder.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let outcomes: Vec<ReplicationOutcome> =
        pool.install(|| seeds.par_iter().map(|&s| run_replication(&source, cfg, s)).collect::<Result<_>>())?;

    let reps = outcomes.len();
    let fit = mean_by_key(outcomes.iter().flat_map(|o| o.fit_seconds.iter().cloned()), reps);
    let forecast = mean_by_key(outcomes.iter().flat_map(|o| o.forecast_seconds.iter().cloned()), reps);
    let (mut resp, mut cov) = (Vec::with_capacity(reps), Vec::with_capacity(reps));
    for o in outcomes {
        resp.push(o.responses);
        cov.push(o.covariates);
    }
    let mut failures = Vec::new();
    let responses = combine(resp, &mut failures)?;
    let covariates = combine(cov, &mut failures)?;
    check_failures(&failures, reps, cfg.failure_limit)?;
    let provenance = CompetitionProvenance {
        version: env!("CARGO_PKG_VERSION").to_string(),
        master_seed: cfg.seed,
        replication_seeds: seeds,
        projection_distance: source.projection_distance(),
        // thread count does not affect results
        config: CompetitionConfig { models: canonical_models(&cfg.models), jobs: None, ..cfg.clone() },
    };
    Ok(CompetitionResult {
        responses,
        covariates,
        failures,
        timings: Timings { fit, forecast, total_seconds: start.elapsed().as_secs_f64() },
        provenance,
    })
}

impl CompetitionResult {
    /// Reports (`responses.*`, `covariates.*`, `failures.csv`, `provenance.json`)
    /// are deterministic given the config; wall-clock goes to `timings.json` only.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, report) in [("responses", &self.responses), ("covariates", &self.covariates)] {
            if let Some(r) = report {
                r.write_csv(&dir.join(format!("{name}.csv")))?;
                std::fs::write(dir.join(format!("{name}.txt")), r.pretty())?;
            }
        }
        let mut w = csv::Writer::from_path(dir.join("failures.csv"))?;
        w.write_record(["model", "replication", "message"])?;
        for f in &self.failures {
            w.write_record([f.model.as_str(), &f.replication.to_string(), f.message.as_str()])?;
        }
        w.flush()?;
        std::fs::write(dir.join("provenance.json"), serde_json::to_string_pretty(&self.provenance)? + "\n")?;
        std::fs::write(dir.join("timings.json"), serde_json::to_string_pretty(&self.timings)? + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests;
