use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::LongitudinalDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Factor {
    /// Indicator of a response, written `resp[name]`.
    Response(String),
    Covariate(String),
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Factor::Covariate(name) => write!(f, "{name}"),
            Factor::Response(name) => write!(f, "resp[{name}]"),
        }
    }
}

/// Product of factors; the empty product is the intercept.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Term {
    pub factors: Vec<Factor>,
}

impl Term {
    pub fn is_intercept(&self) -> bool {
        self.factors.is_empty()
    }

    fn name(&self) -> String {
        if self.is_intercept() {
            "(Intercept)".into()
        } else {
            self.factors.iter().map(|f| f.to_string()).collect::<Vec<_>>().join(":")
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_intercept() {
            write!(f, "1")
        } else {
            write!(f, "{}", self.name())
        }
    }
}

/// Right-hand side of a marginal regression, e.g. `1 + X1 + X2:X4 + resp[Y2]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FormulaSpec", into = "FormulaSpec")]
pub struct ModelFormula {
    terms: Vec<Term>,
    /// Responses the model covers; empty means every response in the dataset.
    pub responses: Vec<String>,
    /// Separate coefficients per response (columns expanded by response indicators).
    pub per_response: bool,
}

#[derive(Serialize, Deserialize)]
struct FormulaSpec {
    terms: String,
    #[serde(default)]
    responses: Vec<String>,
    #[serde(default)]
    per_response: bool,
}

impl TryFrom<FormulaSpec> for ModelFormula {
    type Error = Error;
    fn try_from(spec: FormulaSpec) -> Result<Self> {
        let mut f: ModelFormula = spec.terms.parse()?;
        f.responses = spec.responses;
        f.per_response = spec.per_response;
        Ok(f)
    }
}

impl From<ModelFormula> for FormulaSpec {
    fn from(f: ModelFormula) -> Self {
        FormulaSpec { terms: f.to_string(), responses: f.responses, per_response: f.per_response }
    }
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_alphabetic() || c == '_' || c == '.')
        && chars.all(|c| c.is_alphanumeric() || c == '_' || c == '.')
}

fn parse_factor(raw: &str) -> Result<Factor> {
    let raw = raw.trim();
    if let Some(inner) = raw.strip_prefix("resp[").and_then(|r| r.strip_suffix(']')) {
        let inner = inner.trim();
        if inner.is_empty() {
            return Err(Error::Formula("empty response indicator".into()));
        }
        return Ok(Factor::Response(inner.to_string()));
    }
    if is_identifier(raw) {
        Ok(Factor::Covariate(raw.to_string()))
    } else {
        Err(Error::Formula(format!("cannot parse factor {raw:?}")))
    }
}

impl FromStr for ModelFormula {
    type Err = Error;

    fn from_str(expr: &str) -> Result<Self> {
        let mut terms: Vec<Term> = Vec::new();
        for raw in expr.split('+') {
            let raw = raw.trim();
            if raw.is_empty() {
                return Err(Error::Formula(format!("empty term in {expr:?}")));
            }
            let term = if raw == "1" {
                Term { factors: Vec::new() }
            } else {
                let mut factors = raw.split(':').map(parse_factor).collect::<Result<Vec<_>>>()?;
                factors.sort();
                if factors.windows(2).any(|w| w[0] == w[1]) {
                    return Err(Error::Formula(format!("repeated factor in term {raw:?}")));
                }
                Term { factors }
            };
            if terms.contains(&term) {
                return Err(Error::Formula(format!("duplicate term {raw:?}")));
            }
            terms.push(term);
        }
        // intercept first
        terms.sort_by_key(|t| !t.is_intercept());
        Ok(Self { terms, responses: Vec::new(), per_response: false })
    }
}

impl fmt::Display for ModelFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.terms.iter().map(|t| t.to_string()).collect();
        write!(f, "{}", parts.join(" + "))
    }
}

impl ModelFormula {
    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn with_responses<S: Into<String>>(mut self, responses: impl IntoIterator<Item = S>) -> Self {
        self.responses = responses.into_iter().map(Into::into).collect();
        self
    }

    pub fn per_response(mut self, flag: bool) -> Self {
        self.per_response = flag;
        self
    }

    /// Dataset indices of the responses covered by the model.
    pub fn response_indices(&self, ds: &LongitudinalDataset) -> Result<Vec<usize>> {
        if self.responses.is_empty() {
            return Ok((0..ds.n_responses()).collect());
        }
        let mut out = Vec::with_capacity(self.responses.len());
        for r in &self.responses {
            let idx = resolve_response(ds, r)?;
            if out.contains(&idx) {
                return Err(Error::Formula(format!("response {r} selected twice")));
            }
            out.push(idx);
        }
        Ok(out)
    }

    /// Column names of the design this formula produces on `ds`.
    pub fn column_names(&self, ds: &LongitudinalDataset) -> Result<Vec<String>> {
        Ok(self.resolve(ds)?.names)
    }

    fn resolve(&self, ds: &LongitudinalDataset) -> Result<Resolved> {
        let responses = self.response_indices(ds)?;
        let mut base = Vec::with_capacity(self.terms.len());
        for term in &self.terms {
            let mut factors = Vec::with_capacity(term.factors.len());
            for f in &term.factors {
                factors.push(match f {
                    Factor::Covariate(name) => {
                        let c = ds
                            .covariates()
                            .iter()
                            .position(|c| &c.name == name)
                            .ok_or_else(|| Error::Formula(format!("unknown column {name}")))?;
                        Resolved1::Covariate(c)
                    }
                    Factor::Response(name) => {
                        if self.per_response {
                            return Err(Error::Formula(format!(
                                "response indicator {f} is redundant in a per-response formula"
                            )));
                        }
                        let r = resolve_response(ds, name)?;
                        if !responses.contains(&r) {
                            return Err(Error::Formula(format!("indicator {f} refers to an unselected response")));
                        }
                        Resolved1::Response(r)
                    }
                });
            }
            base.push((term.name(), factors));
        }
        let mut columns = Vec::new();
        let mut names = Vec::new();
        if self.per_response {
            for &r in &responses {
                for (name, factors) in &base {
                    let label = if factors.is_empty() {
                        format!("resp[{}]", ds.responses()[r])
                    } else {
                        format!("resp[{}]:{name}", ds.responses()[r])
                    };
                    names.push(label);
                    let mut fs = factors.clone();
                    fs.push(Resolved1::Response(r));
                    columns.push(fs);
                }
            }
        } else {
            for (name, factors) in base {
                names.push(name);
                columns.push(factors);
            }
        }
        if columns.is_empty() {
            return Err(Error::Formula("formula has no terms".into()));
        }
        Ok(Resolved { responses, names, columns })
    }
}

fn resolve_response(ds: &LongitudinalDataset, name: &str) -> Result<usize> {
    if let Some(i) = ds.response_index(name) {
        return Ok(i);
    }
    match name.parse::<usize>() {
        Ok(i) if (1..=ds.n_responses()).contains(&i) => Ok(i - 1),
        _ => Err(Error::Formula(format!("unknown response {name}"))),
    }
}

#[derive(Debug, Clone, Copy)]
enum Resolved1 {
    Covariate(usize),
    Response(usize),
}

struct Resolved {
    responses: Vec<usize>,
    names: Vec<String>,
    columns: Vec<Vec<Resolved1>>,
}

/// Design rows for every (subject, occasion, selected response) cell, in that
/// nesting order, with the aligned responses.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub names: Vec<String>,
    pub x: DMatrix<f64>,
    pub y: Vec<Option<u8>>,
    pub n_subjects: usize,
    pub n_times: usize,
    /// Dataset indices of the selected responses.
    pub responses: Vec<usize>,
}

impl Design {
    pub fn n_responses(&self) -> usize {
        self.responses.len()
    }

    pub fn ncols(&self) -> usize {
        self.x.ncols()
    }

    pub fn row(&self, i: usize, t: usize, j: usize) -> usize {
        (i * self.n_times + t) * self.n_responses() + j
    }

    /// Rows of one subject's cluster.
    pub fn cluster(&self, i: usize) -> std::ops::Range<usize> {
        let size = self.n_times * self.n_responses();
        i * size..(i + 1) * size
    }

    pub fn covariates_complete(&self, row: usize) -> bool {
        self.x.row(row).iter().all(|v| v.is_finite())
    }

    /// Cell contributes to estimation: response observed and design row complete.
    pub fn usable(&self, row: usize) -> bool {
        self.y[row].is_some() && self.covariates_complete(row)
    }

    /// Linear predictor `x·β` for every row (`NaN` where covariates are missing).
    pub fn linear_predictor(&self, beta: &[f64]) -> Result<Vec<f64>> {
        if beta.len() != self.ncols() {
            return Err(Error::shape(format!("{} coefficients for {} design columns", beta.len(), self.ncols())));
        }
        Ok((&self.x * DVector::from_column_slice(beta)).as_slice().to_vec())
    }

    /// Fail with the names of columns that are linear combinations of earlier ones
    /// (over usable rows).
    pub fn check_rank(&self) -> Result<()> {
        let rows: Vec<usize> = (0..self.x.nrows()).filter(|&r| self.usable(r)).collect();
        let mut basis: Vec<DVector<f64>> = Vec::new();
        let mut dependent = Vec::new();
        for c in 0..self.ncols() {
            let col = DVector::from_iterator(rows.len(), rows.iter().map(|&r| self.x[(r, c)]));
            let scale = col.norm();
            let mut v = col;
            for _ in 0..2 {
                for b in &basis {
                    let proj = b.dot(&v);
                    v.axpy(-proj, b, 1.0);
                }
            }
            let norm = v.norm();
            if scale == 0.0 || norm <= 1e-9 * scale {
                dependent.push(self.names[c].clone());
            } else {
                basis.push(v / norm);
            }
        }
        if dependent.is_empty() {
            Ok(())
        } else {
            Err(Error::RankDeficient { columns: dependent })
        }
    }
}

/// Evaluate `formula` on every cell of `ds`. Intercept (or the first response
/// intercept for per-response formulas) comes first; interaction columns are
/// elementwise products.
pub fn design_matrix(ds: &LongitudinalDataset, formula: &ModelFormula) -> Result<Design> {
    let resolved = formula.resolve(ds)?;
    let (n, t) = (ds.n_subjects(), ds.n_times());
    let k = resolved.responses.len();
    let p = resolved.columns.len();
    let mut x = DMatrix::zeros(n * t * k, p);
    let mut y = Vec::with_capacity(n * t * k);
    for i in 0..n {
        for tt in 0..t {
            for (jj, &r) in resolved.responses.iter().enumerate() {
                let row = (i * t + tt) * k + jj;
                y.push(ds.y(i, tt, r));
                for (c, factors) in resolved.columns.iter().enumerate() {
                    let mut v = 1.0;
                    for f in factors {
                        v *= match *f {
                            Resolved1::Covariate(ci) => ds.value(&ds.covariates()[ci], i, tt),
                            Resolved1::Response(rr) => (rr == r) as u8 as f64,
                        };
                    }
                    x[(row, c)] = v;
                }
            }
        }
    }
    Ok(Design { names: resolved.names, x, y, n_subjects: n, n_times: t, responses: resolved.responses })
}
