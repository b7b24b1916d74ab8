use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Covariate, CovariateKind, LongitudinalDataset};
use crate::error::{Error, Result};

const MISSING: &str = "NA";
const KEY_COLUMNS: [&str; 4] = ["subject", "time", "resp_id", "y"];

/// Covariate computed from the time label as `(time - shift) / divisor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeAffine {
    pub shift: f64,
    pub divisor: f64,
}

impl TimeAffine {
    pub fn apply(&self, time: i64) -> f64 {
        (time as f64 - self.shift) / self.divisor
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    pub kind: CovariateKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_affine: Option<TimeAffine>,
}

/// JSON sidecar describing the columns of a long-format CSV.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    /// Response order; defaults to order of first appearance.
    #[serde(default)]
    pub responses: Vec<String>,
    /// Covariates to load. When empty every extra CSV column is loaded and its kind inferred.
    #[serde(default)]
    pub covariates: Vec<CovariateSpec>,
}

impl Schema {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }
}

fn parse_value(raw: &str, line: usize, column: &str) -> Result<f64> {
    if raw == MISSING || raw.is_empty() {
        return Ok(f64::NAN);
    }
    raw.parse::<f64>().map_err(|_| Error::Parse {
        line,
        message: format!("column {column}: cannot parse {raw:?} as a number"),
    })
}

/// Load a long-format panel: one row per (subject, time, response).
pub fn load_csv(path: &Path, schema: Option<&Schema>) -> Result<LongitudinalDataset> {
    let file = File::open(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers()?.clone();
    let position = |name: &str| headers.iter().position(|h| h == name);
    let mut key_idx = [0usize; 4];
    for (slot, name) in key_idx.iter_mut().zip(KEY_COLUMNS) {
        *slot = position(name).ok_or_else(|| Error::Schema(format!("missing column {name}")))?;
    }
    let default_schema = Schema::default();
    let schema = schema.unwrap_or(&default_schema);

    // (name, csv column or None for derived, declared kind, derivation)
    let mut specs: Vec<(String, Option<usize>, Option<CovariateKind>, Option<TimeAffine>)> = Vec::new();
    if schema.covariates.is_empty() {
        for (idx, h) in headers.iter().enumerate() {
            if !KEY_COLUMNS.contains(&h) {
                specs.push((h.to_string(), Some(idx), None, None));
            }
        }
    } else {
        for c in &schema.covariates {
            let col = position(&c.name);
            if col.is_none() && c.time_affine.is_none() {
                return Err(Error::Schema(format!("missing column {}", c.name)));
            }
            let col = if c.time_affine.is_some() { None } else { col };
            specs.push((c.name.clone(), col, Some(c.kind), c.time_affine));
        }
    }

    struct Row {
        line: usize,
        subject: usize,
        time: i64,
        resp: usize,
        y: Option<u8>,
        values: Vec<f64>,
    }
    let mut subjects: Vec<String> = Vec::new();
    let mut subject_ids: HashMap<String, usize> = HashMap::new();
    let mut responses: Vec<String> = schema.responses.clone();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let field = |idx: usize| record.get(idx).unwrap_or("");
        let subject_name = field(key_idx[0]).to_string();
        let time = field(key_idx[1]).parse::<i64>().map_err(|_| Error::Parse {
            line,
            message: format!("time {:?} is not an integer", field(key_idx[1])),
        })?;
        let resp_name = field(key_idx[2]);
        let resp = match responses.iter().position(|r| r == resp_name) {
            Some(r) => r,
            None if schema.responses.is_empty() => {
                responses.push(resp_name.to_string());
                responses.len() - 1
            }
            None => {
                return Err(Error::Parse { line, message: format!("response {resp_name:?} not declared in schema") });
            }
        };
        let y = match field(key_idx[3]) {
            "0" => Some(0),
            "1" => Some(1),
            MISSING | "" => None,
            other => {
                return Err(Error::Parse { line, message: format!("response value {other:?} is not 0, 1 or {MISSING}") });
            }
        };
        let next_id = subjects.len();
        let subject = *subject_ids.entry(subject_name.clone()).or_insert_with(|| {
            subjects.push(subject_name);
            next_id
        });
        let mut values = Vec::with_capacity(specs.len());
        for (name, col, _, derived) in &specs {
            values.push(match (col, derived) {
                (_, Some(affine)) => affine.apply(time),
                (Some(c), None) => parse_value(field(*c), line, name)?,
                (None, None) => unreachable!(),
            });
        }
        rows.push(Row { line, subject, time, resp, y, values });
    }
    if rows.is_empty() {
        return Err(Error::Schema("no data rows".into()));
    }

    let mut times: Vec<i64> = rows.iter().map(|r| r.time).collect();
    times.sort_unstable();
    times.dedup();
    let (n, t, k) = (subjects.len(), times.len(), responses.len());
    let time_pos: HashMap<i64, usize> = times.iter().enumerate().map(|(i, &x)| (x, i)).collect();
    let mut y = vec![None; n * t * k];
    let mut filled = vec![false; n * t * k];
    let mut cov_values = vec![vec![f64::NAN; n * t]; specs.len()];
    let mut cov_set = vec![false; n * t];
    for row in &rows {
        let ti = time_pos[&row.time];
        let cell = (row.subject * t + ti) * k + row.resp;
        if filled[cell] {
            return Err(Error::Parse {
                line: row.line,
                message: format!("duplicate row for subject {} time {} response {}", subjects[row.subject], row.time, responses[row.resp]),
            });
        }
        filled[cell] = true;
        y[cell] = row.y;
        let occ = row.subject * t + ti;
        for (c, v) in row.values.iter().enumerate() {
            let slot = &mut cov_values[c][occ];
            if cov_set[occ] && !(slot.to_bits() == v.to_bits() || (slot.is_nan() && v.is_nan())) {
                return Err(Error::Parse {
                    line: row.line,
                    message: format!("covariate {} differs between response rows of the same occasion", specs[c].0),
                });
            }
            *slot = *v;
        }
        cov_set[occ] = true;
    }
    if let Some(cell) = filled.iter().position(|f| !f) {
        let (i, rest) = (cell / (t * k), cell % (t * k));
        return Err(Error::Schema(format!(
            "unbalanced panel: subject {} has no row for time {} response {}",
            subjects[i],
            times[rest / k],
            responses[rest % k]
        )));
    }

    let covariates = specs
        .into_iter()
        .zip(cov_values)
        .map(|((name, _, kind, derived), values)| {
            let kind = kind.unwrap_or_else(|| infer_kind(&values, n, t));
            Covariate { name, kind, derived, values }
        })
        .collect();
    LongitudinalDataset::new(subjects, times, responses, y, covariates)
}

fn infer_kind(values: &[f64], n: usize, t: usize) -> CovariateKind {
    let constant = (0..n).all(|i| {
        let row: Vec<f64> = values[i * t..(i + 1) * t].iter().copied().filter(|v| !v.is_nan()).collect();
        row.windows(2).all(|w| w[0] == w[1])
    });
    if constant {
        CovariateKind::TimeInvariant
    } else {
        CovariateKind::TimeVarying
    }
}

fn format_value(v: f64) -> String {
    if v.is_nan() {
        MISSING.to_string()
    } else {
        format!("{v}")
    }
}

/// Write the panel in long format, rows ordered by subject, time, response.
pub fn write_csv(ds: &LongitudinalDataset, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let mut header = KEY_COLUMNS.join(",");
    for c in ds.covariates() {
        header.push(',');
        header.push_str(&c.name);
    }
    writeln!(out, "{header}")?;
    for (i, subject) in ds.subjects().iter().enumerate() {
        for (t, time) in ds.times().iter().enumerate() {
            let covs: String = ds.covariates().iter().map(|c| format!(",{}", format_value(ds.value(c, i, t)))).collect();
            for (j, resp) in ds.responses().iter().enumerate() {
                let y = ds.y(i, t, j).map_or(MISSING.to_string(), |v| v.to_string());
                writeln!(out, "{subject},{time},{resp},{y}{covs}")?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_schema(ds: &LongitudinalDataset, path: &Path) -> Result<()> {
    let schema = Schema {
        responses: ds.responses().to_vec(),
        covariates: ds
            .covariates()
            .iter()
            .map(|c| CovariateSpec { name: c.name.clone(), kind: c.kind, time_affine: c.derived })
            .collect(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&schema)? + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::tests::toy;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn loads_well_formed_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::from("subject,time,resp_id,y,x\n");
        for s in ["s1", "s2"] {
            for t in 1..=3 {
                for r in ["r1", "r2"] {
                    body.push_str(&format!("{s},{t},{r},{},{}\n", (t % 2), t as f64 * 0.5));
                }
            }
        }
        let ds = load_csv(&write(&dir, "d.csv", &body), None).unwrap();
        assert_eq!((ds.n_subjects(), ds.n_times(), ds.n_responses()), (2, 3, 2));
        assert_eq!(ds.covariate("x").unwrap().kind, CovariateKind::TimeVarying);
    }

    #[test]
    fn rejects_non_binary_response_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let body = "subject,time,resp_id,y\na,1,r,0\na,2,r,2\n";
        match load_csv(&write(&dir, "d.csv", body), None) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("\"2\""));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_ragged_panel_and_missing_column() {
        let dir = tempfile::tempdir().unwrap();
        let ragged = "subject,time,resp_id,y\na,1,r,0\na,2,r,1\nb,1,r,1\n";
        assert!(matches!(load_csv(&write(&dir, "r.csv", ragged), None), Err(Error::Schema(m)) if m.contains("unbalanced")));
        let nokey = "subject,time,y\na,1,0\n";
        assert!(matches!(load_csv(&write(&dir, "k.csv", nokey), None), Err(Error::Schema(m)) if m.contains("resp_id")));
    }

    #[test]
    fn write_then_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy();
        let (csv_path, schema_path) = (dir.path().join("d.csv"), dir.path().join("d.json"));
        write_csv(&ds, &csv_path).unwrap();
        write_schema(&ds, &schema_path).unwrap();
        let schema = Schema::from_json_file(&schema_path).unwrap();
        assert_eq!(load_csv(&csv_path, Some(&schema)).unwrap(), ds);
    }

    #[test]
    fn derived_week_column() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::from("subject,time,resp_id,y,married\n");
        for day in 17..=28 {
            body.push_str(&format!("m1,{day},stress,0,1\nm1,{day},illness,1,1\n"));
        }
        let schema: Schema = serde_json::from_str(
            r#"{"responses":["stress","illness"],"covariates":[
                {"name":"married","kind":"time_invariant"},
                {"name":"week","kind":"known","time_affine":{"shift":22,"divisor":7}}]}"#,
        )
        .unwrap();
        let ds = load_csv(&write(&dir, "m.csv", &body), Some(&schema)).unwrap();
        let week = ds.covariate("week").unwrap();
        let t25 = ds.time_index(25).unwrap();
        assert!((ds.value(week, 0, t25) - 3.0 / 7.0).abs() < 1e-15);
        assert_eq!(ds.n_responses(), 2);
    }
}
