//! Balanced-panel longitudinal data: responses, covariates, train/forecast
//! partitions and model design matrices.

mod formula;
mod io;

pub use formula::{design_matrix, Design, Factor, ModelFormula, Term};
pub use io::{load_csv, write_csv, write_schema, CovariateSpec, Schema, TimeAffine};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateKind {
    /// Constant over time within a subject.
    TimeInvariant,
    /// Random over time; must be forecast before it can be used out of sample.
    TimeVarying,
    /// Deterministic function of time (e.g. `week`); known at forecast times.
    Known,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Covariate {
    pub name: String,
    pub kind: CovariateKind,
    /// Set for covariates computed from the time label.
    pub derived: Option<TimeAffine>,
    /// Subject-major values, `values[i * T + t]`; `NaN` marks a missing cell.
    pub values: Vec<f64>,
}

/// Long-format panel with `N` subjects, `T` common occasions and `k` binary responses.
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalDataset {
    subjects: Vec<String>,
    times: Vec<i64>,
    responses: Vec<String>,
    y: Vec<Option<u8>>,
    covariates: Vec<Covariate>,
}

impl LongitudinalDataset {
    /// `y` is indexed `(i * T + t) * k + j`.
    pub fn new(
        subjects: Vec<String>,
        times: Vec<i64>,
        responses: Vec<String>,
        y: Vec<Option<u8>>,
        covariates: Vec<Covariate>,
    ) -> Result<Self> {
        let (n, t, k) = (subjects.len(), times.len(), responses.len());
        if n == 0 || t == 0 || k == 0 {
            return Err(Error::Schema("dataset needs at least one subject, occasion and response".into()));
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Schema("time labels must be strictly increasing".into()));
        }
        if y.len() != n * t * k {
            return Err(Error::shape(format!("expected {} response cells, got {}", n * t * k, y.len())));
        }
        if let Some(bad) = y.iter().flatten().find(|&&v| v > 1) {
            return Err(Error::Schema(format!("non-binary response value {bad}")));
        }
        let mut seen = std::collections::HashSet::new();
        for c in &covariates {
            if c.values.len() != n * t {
                return Err(Error::shape(format!("covariate {} has {} values, expected {}", c.name, c.values.len(), n * t)));
            }
            if !seen.insert(c.name.as_str()) || responses.contains(&c.name) {
                return Err(Error::Schema(format!("duplicate column name {}", c.name)));
            }
            if c.kind == CovariateKind::TimeInvariant {
                for i in 0..n {
                    let row = &c.values[i * t..(i + 1) * t];
                    let mut observed = row.iter().filter(|v| !v.is_nan());
                    if let Some(first) = observed.next() {
                        if observed.any(|v| v != first) {
                            return Err(Error::Schema(format!(
                                "time-invariant covariate {} varies over time for subject {}",
                                c.name, subjects[i]
                            )));
                        }
                    }
                }
            }
        }
        Ok(Self { subjects, times, responses, y, covariates })
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn n_responses(&self) -> usize {
        self.responses.len()
    }

    pub fn subjects(&self) -> &[String] {
        &self.subjects
    }

    pub fn times(&self) -> &[i64] {
        &self.times
    }

    pub fn responses(&self) -> &[String] {
        &self.responses
    }

    pub fn covariates(&self) -> &[Covariate] {
        &self.covariates
    }

    pub fn covariate(&self, name: &str) -> Option<&Covariate> {
        self.covariates.iter().find(|c| c.name == name)
    }

    pub fn response_index(&self, name: &str) -> Option<usize> {
        self.responses.iter().position(|r| r == name)
    }

    pub fn time_index(&self, label: i64) -> Option<usize> {
        self.times.iter().position(|&t| t == label)
    }

    /// Response of subject `i` at occasion index `t` for response `j`.
    pub fn y(&self, i: usize, t: usize, j: usize) -> Option<u8> {
        self.y[(i * self.n_times() + t) * self.n_responses() + j]
    }

    pub fn response_cells(&self) -> &[Option<u8>] {
        &self.y
    }

    /// Covariate value of subject `i` at occasion index `t`.
    pub fn value(&self, covariate: &Covariate, i: usize, t: usize) -> f64 {
        covariate.values[i * self.n_times() + t]
    }

    /// Observed prevalence of response `j` over all occasions.
    pub fn prevalence(&self, j: usize) -> f64 {
        let k = self.n_responses();
        let (mut ones, mut total) = (0usize, 0usize);
        for v in self.y.iter().skip(j).step_by(k).flatten() {
            ones += *v as usize;
            total += 1;
        }
        if total == 0 {
            f64::NAN
        } else {
            ones as f64 / total as f64
        }
    }

    /// Sub-panel restricted to the occasion indices `range`.
    pub fn select_times(&self, range: std::ops::Range<usize>) -> Result<Self> {
        let t = self.n_times();
        if range.start >= range.end || range.end > t {
            return Err(Error::Split(format!("occasion range {range:?} outside 0..{t}")));
        }
        let k = self.n_responses();
        let mut y = Vec::with_capacity(self.n_subjects() * range.len() * k);
        for i in 0..self.n_subjects() {
            y.extend_from_slice(&self.y[(i * t + range.start) * k..(i * t + range.end) * k]);
        }
        let covariates = self
            .covariates
            .iter()
            .map(|c| Covariate {
                values: (0..self.n_subjects())
                    .flat_map(|i| c.values[i * t + range.start..i * t + range.end].iter().copied())
                    .collect(),
                ..c.clone()
            })
            .collect();
        Ok(Self {
            subjects: self.subjects.clone(),
            times: self.times[range].to_vec(),
            responses: self.responses.clone(),
            y,
            covariates,
        })
    }

    /// Replace the values of a covariate (e.g. with forecasts).
    pub fn with_covariate_values(mut self, name: &str, values: Vec<f64>) -> Result<Self> {
        let expected = self.n_subjects() * self.n_times();
        let c = self
            .covariates
            .iter_mut()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::Formula(format!("unknown covariate {name}")))?;
        if values.len() != expected {
            return Err(Error::shape(format!("covariate {name}: {} values, expected {expected}", values.len())));
        }
        c.values = values;
        Ok(self)
    }

    /// Copy with every response cell masked (used for forecast-time designs).
    pub fn without_responses(&self) -> Self {
        Self { y: vec![None; self.y.len()], ..self.clone() }
    }

    /// Append the occasions of `later` after those of `self`.
    pub fn concat(&self, later: &Self) -> Result<Self> {
        if self.subjects != later.subjects || self.responses != later.responses {
            return Err(Error::Split("datasets disagree on subjects or responses".into()));
        }
        if later.times.first() <= self.times.last() {
            return Err(Error::Split("second dataset must start after the first ends".into()));
        }
        let names_a: Vec<_> = self.covariates.iter().map(|c| (&c.name, c.kind)).collect();
        let names_b: Vec<_> = later.covariates.iter().map(|c| (&c.name, c.kind)).collect();
        if names_a != names_b {
            return Err(Error::Split("datasets disagree on covariates".into()));
        }
        let (ta, tb, k) = (self.n_times(), later.n_times(), self.n_responses());
        let n = self.n_subjects();
        let mut y = Vec::with_capacity(self.y.len() + later.y.len());
        for i in 0..n {
            y.extend_from_slice(&self.y[i * ta * k..(i + 1) * ta * k]);
            y.extend_from_slice(&later.y[i * tb * k..(i + 1) * tb * k]);
        }
        let covariates = self
            .covariates
            .iter()
            .zip(&later.covariates)
            .map(|(a, b)| Covariate {
                values: (0..n)
                    .flat_map(|i| {
                        a.values[i * ta..(i + 1) * ta].iter().chain(&b.values[i * tb..(i + 1) * tb]).copied()
                    })
                    .collect(),
                ..a.clone()
            })
            .collect();
        let mut times = self.times.clone();
        times.extend_from_slice(&later.times);
        Self::new(self.subjects.clone(), times, self.responses.clone(), y, covariates)
    }
}

/// Contiguous training window followed immediately by the forecast window,
/// both given as inclusive time labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: (i64, i64),
    pub forecast: (i64, i64),
}

impl SplitSpec {
    pub fn new(train: (i64, i64), forecast: (i64, i64)) -> Result<Self> {
        let spec = Self { train, forecast };
        spec.check()?;
        Ok(spec)
    }

    fn check(&self) -> Result<()> {
        if self.train.0 > self.train.1 || self.forecast.0 > self.forecast.1 {
            return Err(Error::Split("empty range".into()));
        }
        if self.forecast.0 <= self.train.1 {
            return Err(Error::Split("train and forecast ranges overlap".into()));
        }
        if self.forecast.0 != self.train.1 + 1 {
            return Err(Error::Split(format!(
                "forecast must start at {} (gap after training end {})",
                self.train.1 + 1,
                self.train.1
            )));
        }
        Ok(())
    }

    /// Forecast horizon `m`.
    pub fn horizon(&self) -> usize {
        (self.forecast.1 - self.forecast.0 + 1) as usize
    }
}

/// Partition into the training panel and the holdout panel (true responses kept for scoring).
pub fn split(ds: &LongitudinalDataset, spec: &SplitSpec) -> Result<(LongitudinalDataset, LongitudinalDataset)> {
    spec.check()?;
    let locate = |label: i64| {
        ds.time_index(label)
            .ok_or_else(|| Error::Split(format!("time {label} is not on the occasion grid")))
    };
    let (a, b) = (locate(spec.train.0)?, locate(spec.train.1)?);
    let (c, d) = (locate(spec.forecast.0)?, locate(spec.forecast.1)?);
    if d - c + 1 != spec.horizon() || b - a + 1 != (spec.train.1 - spec.train.0 + 1) as usize {
        return Err(Error::Split("split ranges must cover consecutive occasions".into()));
    }
    Ok((ds.select_times(a..b + 1)?, ds.select_times(c..d + 1)?))
}
