//! Forecast accuracy: ePCP and AUROC for binary outcomes, MAE and MASE for
//! continuous covariates, plus replication summaries and report emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("length mismatch: {a} vs {b}")));
    }
    if a == 0 {
        return Err(Error::shape("empty input"));
    }
    Ok(())
}

/// Expected proportion of correct prediction.
pub fn epcp<T: Float>(y: &[u8], p: &[T]) -> Result<T> {
    check_len(y.len(), p.len())?;
    let sum = y.iter().zip(p).fold(T::zero(), |acc, (&yi, &pi)| {
        acc + if yi == 1 { pi } else { T::one() - pi }
    });
    Ok(sum / T::from(y.len()).unwrap())
}

/// Average ranks (1-based) with ties sharing the mean rank.
fn average_ranks<T: Float>(values: &[T]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = rank;
        }
        start = end;
    }
    ranks
}

/// Rank-based (Mann–Whitney) area under the ROC curve.
pub fn auroc<T: Float>(y: &[u8], p: &[T]) -> Result<T> {
    check_len(y.len(), p.len())?;
    if p.iter().any(|v| v.is_nan()) {
        return Err(Error::Domain("NaN score".into()));
    }
    let n1 = y.iter().filter(|&&v| v == 1).count();
    let n0 = y.len() - n1;
    if n1 == 0 || n0 == 0 {
        return Err(Error::UndefinedAuroc);
    }
    let ranks = average_ranks(p);
    let rank_sum: f64 = ranks.iter().zip(y).filter(|(_, &yi)| yi == 1).map(|(r, _)| r).sum();
    let u = rank_sum - (n1 * (n1 + 1)) as f64 / 2.0;
    Ok(T::from(u / (n1 as f64 * n0 as f64)).unwrap())
}

pub fn mae<T: Float>(x: &[T], xhat: &[T]) -> Result<T> {
    check_len(x.len(), xhat.len())?;
    let sum = x.iter().zip(xhat).fold(T::zero(), |acc, (&a, &b)| acc + (a - b).abs());
    Ok(sum / T::from(x.len()).unwrap())
}

/// In-sample naive one-step MAE of a training history, `(1/(T-1)) Σ |X_h - X_{h-1}|`.
pub fn naive_scale<T: Float>(history: &[T]) -> Result<T> {
    if history.len() < 2 {
        return Err(Error::invalid("scaled error needs at least two training values"));
    }
    let sum = history.windows(2).fold(T::zero(), |acc, w| acc + (w[1] - w[0]).abs());
    Ok(sum / T::from(history.len() - 1).unwrap())
}

/// Naive scales for each subject's history; a zero scale names the subject.
pub fn naive_scales<T: Float>(histories: &[Vec<T>], subjects: &[String]) -> Result<Vec<T>> {
    check_len(histories.len(), subjects.len())?;
    histories
        .iter()
        .zip(subjects)
        .map(|(h, s)| {
            let scale = naive_scale(h)?;
            if scale == T::zero() {
                Err(Error::DegenerateScale { subject: s.clone() })
            } else {
                Ok(scale)
            }
        })
        .collect()
}

/// Mean absolute scaled error; `scale[c]` is the naive scale of the subject owning cell `c`.
pub fn mase<T: Float>(x: &[T], xhat: &[T], scale: &[T]) -> Result<T> {
    check_len(x.len(), xhat.len())?;
    check_len(x.len(), scale.len())?;
    let mut sum = T::zero();
    for (c, ((&a, &b), &s)) in x.iter().zip(xhat).zip(scale).enumerate() {
        if !(s > T::zero()) {
            return Err(Error::DegenerateScale { subject: format!("cell {c}") });
        }
        sum = sum + (a - b).abs() / s;
    }
    Ok(sum / T::from(x.len()).unwrap())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Measure {
    #[serde(rename = "ePCP")]
    Epcp,
    #[serde(rename = "AUROC")]
    Auroc,
    #[serde(rename = "MAE")]
    Mae,
    #[serde(rename = "MASE")]
    Mase,
}

impl Measure {
    pub fn label(self) -> &'static str {
        match self {
            Measure::Epcp => "ePCP",
            Measure::Auroc => "AUROC",
            Measure::Mae => "MAE",
            Measure::Mase => "MASE",
        }
    }
}

/// A named set of occasions scored together ("5", "5 to 8").
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub label: String,
    pub times: Vec<i64>,
}

impl Window {
    pub fn single(t: i64) -> Self {
        Self { label: t.to_string(), times: vec![t] }
    }

    pub fn range(from: i64, to: i64) -> Self {
        Self { label: format!("{from} to {to}"), times: (from..=to).collect() }
    }

    /// Each occasion of `from..=to` followed by the pooled window.
    pub fn per_time_and_pooled(from: i64, to: i64) -> Vec<Self> {
        let mut out: Vec<Self> = (from..=to).map(Self::single).collect();
        if to > from {
            out.push(Self::range(from, to));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub model: String,
    pub target: String,
    pub window: String,
    pub measure: Measure,
}

/// One replication's scores. `NaN` marks an undefined cell (e.g. AUROC with one class).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AccuracyReport {
    pub cells: Vec<(CellKey, f64)>,
}

impl AccuracyReport {
    pub fn push(&mut self, model: &str, target: &str, window: &str, measure: Measure, value: f64) {
        self.cells.push((
            CellKey { model: model.into(), target: target.into(), window: window.into(), measure },
            value,
        ));
    }

    pub fn extend(&mut self, other: AccuracyReport) {
        self.cells.extend(other.cells);
    }

    pub fn get(&self, model: &str, target: &str, window: &str, measure: Measure) -> Option<f64> {
        self.cells
            .iter()
            .find(|(k, _)| k.model == model && k.target == target && k.window == window && k.measure == measure)
            .map(|(_, v)| *v)
    }

    /// Score binary forecasts over each window, pooling the window's cells.
    /// `times[c]` is the occasion of cell `c`; cells with missing outcomes are skipped.
    pub fn score_binary(
        &mut self,
        model: &str,
        target: &str,
        windows: &[Window],
        times: &[i64],
        y: &[Option<u8>],
        p: &[f64],
    ) -> Result<()> {
        check_len(times.len(), y.len())?;
        check_len(y.len(), p.len())?;
        for w in windows {
            let (mut ys, mut ps) = (Vec::new(), Vec::new());
            for c in 0..y.len() {
                if let (true, Some(v)) = (w.times.contains(&times[c]), y[c]) {
                    ys.push(v);
                    ps.push(p[c]);
                }
            }
            if ys.is_empty() {
                return Err(Error::shape(format!("window {} has no scored cells", w.label)));
            }
            self.push(model, target, &w.label, Measure::Epcp, epcp(&ys, &ps)?);
            let a = match auroc(&ys, &ps) {
                Ok(a) => a,
                Err(Error::UndefinedAuroc) => {
                    log::warn!("{model}/{target} window {}: AUROC undefined (single class)", w.label);
                    f64::NAN
                }
                Err(e) => return Err(e),
            };
            self.push(model, target, &w.label, Measure::Auroc, a);
        }
        Ok(())
    }

    /// Score continuous forecasts (MAE, and MASE when `scale` is given).
    pub fn score_continuous(
        &mut self,
        model: &str,
        target: &str,
        windows: &[Window],
        times: &[i64],
        x: &[f64],
        xhat: &[f64],
        scale: Option<&[f64]>,
    ) -> Result<()> {
        check_len(times.len(), x.len())?;
        for w in windows {
            let cells: Vec<usize> = (0..x.len()).filter(|&c| w.times.contains(&times[c])).collect();
            if cells.is_empty() {
                return Err(Error::shape(format!("window {} has no scored cells", w.label)));
            }
            let xs: Vec<f64> = cells.iter().map(|&c| x[c]).collect();
            let hs: Vec<f64> = cells.iter().map(|&c| xhat[c]).collect();
            self.push(model, target, &w.label, Measure::Mae, mae(&xs, &hs)?);
            if let Some(scale) = scale {
                let ss: Vec<f64> = cells.iter().map(|&c| scale[c]).collect();
                self.push(model, target, &w.label, Measure::Mase, mase(&xs, &hs, &ss)?);
            }
        }
        Ok(())
    }
}

/// Replication summary of one cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation of the replication values.
    pub sd: f64,
    /// `sd / sqrt(n)`.
    pub se: f64,
    /// Replications with a defined value.
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let defined: Vec<f64> = values.iter().copied().filter(|v| !v.is_nan()).collect();
        let n = defined.len();
        if n == 0 {
            return Self { mean: f64::NAN, sd: f64::NAN, se: f64::NAN, n };
        }
        let mean = defined.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (defined.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            f64::NAN
        };
        Self { mean, sd, se: sd / (n as f64).sqrt(), n }
    }
}

/// Cellwise summaries over replications, keyed in first-appearance order.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateReport {
    pub replications: usize,
    pub cells: Vec<(CellKey, Summary)>,
}

/// Cellwise mean/sd/se over replication reports with identical cell sets.
pub fn aggregate(reports: &[AccuracyReport]) -> Result<AggregateReport> {
    let first = reports.first().ok_or_else(|| Error::shape("no reports to aggregate"))?;
    let keys: Vec<&CellKey> = first.cells.iter().map(|(k, _)| k).collect();
    let mut values: Vec<Vec<f64>> = vec![Vec::with_capacity(reports.len()); keys.len()];
    for (r, report) in reports.iter().enumerate() {
        if report.cells.len() != keys.len() {
            return Err(Error::shape(format!("report {r} has {} cells, expected {}", report.cells.len(), keys.len())));
        }
        for (c, (k, v)) in report.cells.iter().enumerate() {
            if k != keys[c] {
                return Err(Error::shape(format!("report {r} cell {c} is {k:?}, expected {:?}", keys[c])));
            }
            values[c].push(*v);
        }
    }
    Ok(AggregateReport {
        replications: reports.len(),
        cells: keys.into_iter().cloned().zip(values.iter().map(|v| Summary::of(v))).collect(),
    })
}

fn window_order(label: &str) -> (i64, u8) {
    match label.split_once(" to ") {
        Some((_, b)) => b.trim().parse().map_or((i64::MAX, 2), |b| (b, 1)),
        None => label.trim().parse().map_or((i64::MAX, 2), |t| (t, 0)),
    }
}

fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        "NA".into()
    } else {
        format!("{v:.6}")
    }
}

impl AggregateReport {
    pub fn get(&self, model: &str, target: &str, window: &str, measure: Measure) -> Option<Summary> {
        self.cells
            .iter()
            .find(|(k, _)| k.model == model && k.target == target && k.window == window && k.measure == measure)
            .map(|(_, s)| *s)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,target,window,measure,mean,sd,se,n\n");
        for (k, s) in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                k.model,
                k.target,
                k.window,
                k.measure.label(),
                fmt_num(s.mean),
                fmt_num(s.sd),
                fmt_num(s.se),
                s.n
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }

    /// Plain-text table per target: one block per window, one row per model,
    /// mean and sd for each measure.
    pub fn pretty(&self) -> String {
        let mut targets: Vec<&str> = Vec::new();
        let mut windows: Vec<&str> = Vec::new();
        let mut models: Vec<&str> = Vec::new();
        let mut measures: Vec<Measure> = Vec::new();
        for (k, _) in &self.cells {
            for (list, item) in [(&mut targets, k.target.as_str()), (&mut windows, k.window.as_str()), (&mut models, k.model.as_str())] {
                if !list.contains(&item) {
                    list.push(item);
                }
            }
            if !measures.contains(&k.measure) {
                measures.push(k.measure);
            }
        }
        // chronological by last occasion; a pooled window follows the single occasion it ends on
        windows.sort_by_key(|w| window_order(w));
        let mut lookup: BTreeMap<(&str, &str, &str, Measure), Summary> = BTreeMap::new();
        for (k, s) in &self.cells {
            lookup.insert((k.model.as_str(), k.target.as_str(), k.window.as_str(), k.measure), *s);
        }
        let width = models.iter().map(|m| m.len()).max().unwrap_or(5).max(5);
        let mut out = String::new();
        for target in &targets {
            let _ = writeln!(out, "{target} ({} replications)", self.replications);
            let mut header = format!("{:<width$}  {:<8}", "Model", "Time");
            for m in &measures {
                let _ = write!(header, "  {:>8} {:>7}", m.label(), "SD");
            }
            let _ = writeln!(out, "{header}");
            let _ = writeln!(out, "{}", "-".repeat(header.len()));
            for window in &windows {
                for model in &models {
                    let mut line = format!("{model:<width$}  {window:<8}");
                    let mut any = false;
                    for m in &measures {
                        match lookup.get(&(*model, *target, *window, *m)) {
                            Some(s) => {
                                any = true;
                                let sd = if s.sd.is_nan() { "NA".to_string() } else { format!("{:.3}", s.sd) };
                                let _ = write!(line, "  {:>8.3} {sd:>7}", s.mean);
                            }
                            None => {
                                let _ = write!(line, "  {:>8} {:>7}", "", "");
                            }
                        }
                    }
                    if any {
                        let _ = writeln!(out, "{}", line.trim_end());
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair_count_auroc(y: &[u8], p: &[f64]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for a in 0..y.len() {
            for b in 0..y.len() {
                if y[a] == 1 && y[b] == 0 {
                    den += 1.0;
                    num += if p[a] > p[b] { 1.0 } else if p[a] == p[b] { 0.5 } else { 0.0 };
                }
            }
        }
        num / den
    }

    fn trapezoid_auroc(y: &[u8], p: &[f64]) -> f64 {
        let mut th: Vec<f64> = p.to_vec();
        th.sort_by(|a, b| b.partial_cmp(a).unwrap());
        th.dedup();
        let pos = y.iter().filter(|&&v| v == 1).count() as f64;
        let neg = y.len() as f64 - pos;
        let mut pts = vec![(0.0, 0.0)];
        for c in th {
            let tp = y.iter().zip(p).filter(|(&yi, &pi)| yi == 1 && pi >= c).count() as f64;
            let fp = y.iter().zip(p).filter(|(&yi, &pi)| yi == 0 && pi >= c).count() as f64;
            pts.push((fp / neg, tp / pos));
        }
        pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
    }

    #[test]
    fn epcp_examples() {
        assert_eq!(epcp(&[1, 0, 1], &[1.0, 0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(epcp(&[1, 0, 1], &[0.5; 3]).unwrap(), 0.5);
        assert!((epcp(&[1, 0, 1], &[0.8, 0.3, 0.6]).unwrap() - 0.7).abs() < 1e-15);
        assert!(matches!(epcp(&[1, 0], &[0.5]), Err(Error::Shape(_))));
        assert!((epcp(&[1u8, 0], &[0.75f32, 0.25]).unwrap() - 0.75).abs() < 1e-7);
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[1, 1, 0, 0], &[0.9, 0.8, 0.3, 0.1]).unwrap(), 1.0);
        assert_eq!(auroc(&[1, 0, 1, 0], &[0.4; 4]).unwrap(), 0.5);
        assert!((auroc(&[1, 0, 1, 0], &[0.9, 0.8, 0.4, 0.2]).unwrap() - 0.75).abs() < 1e-15);
        assert!(matches!(auroc(&[1, 1], &[0.2, 0.3]), Err(Error::UndefinedAuroc)));
    }

    #[test]
    fn auroc_exhaustive_small_vectors() {
        // every labelling of length ≤ 12 against a fixed tied score vector
        let scores = [0.1, 0.4, 0.4, 0.7, 0.2, 0.9, 0.4, 0.55, 0.1, 0.8, 0.3, 0.6];
        for len in 2..=12 {
            for mask in 0u32..(1 << len) {
                let y: Vec<u8> = (0..len).map(|b| ((mask >> b) & 1) as u8).collect();
                let ones = y.iter().filter(|&&v| v == 1).count();
                if ones == 0 || ones == len {
                    continue;
                }
                let p = &scores[..len];
                let a = auroc(&y, p).unwrap();
                assert!((a - pair_count_auroc(&y, p)).abs() < 1e-12);
                assert!((a - trapezoid_auroc(&y, p)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mae_mase_examples() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((mae(&[1.0, -1.0, 2.0], &[0.0; 3]).unwrap() - 4.0 / 3.0).abs() < 1e-15);
        let scale = naive_scale(&[0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(scale, 1.0);
        assert_eq!(mase(&[3.0], &[1.0], &[scale]).unwrap(), 2.0);
        assert_eq!(mase(&[3.0], &[3.0], &[scale]).unwrap(), 0.0);
        let err = naive_scales(&[vec![1.0, 1.0, 1.0]], &["s9".into()]);
        assert!(matches!(err, Err(Error::DegenerateScale { subject }) if subject == "s9"));
    }

    #[test]
    fn aggregate_examples() {
        let mk = |v: f64| {
            let mut r = AccuracyReport::default();
            r.push("UMM", "Y1", "5", Measure::Epcp, v);
            r
        };
        let agg = aggregate(&[mk(0.6), mk(0.7), mk(0.8)]).unwrap();
        let s = agg.get("UMM", "Y1", "5", Measure::Epcp).unwrap();
        assert!((s.mean - 0.7).abs() < 1e-15);
        assert!((s.sd - 0.1).abs() < 1e-12);
        assert!((s.se - 0.1 / 3f64.sqrt()).abs() < 1e-12);
        let same = aggregate(&[mk(0.5), mk(0.5)]).unwrap();
        assert_eq!(same.cells[0].1.sd, 0.0);
        let mean = aggregate(&[mk(1.0), mk(2.0), mk(3.0)]).unwrap();
        assert_eq!(mean.cells[0].1.mean, 2.0);
        let mut other = mk(0.1);
        other.push("UMM", "Y1", "6", Measure::Epcp, 0.2);
        assert!(matches!(aggregate(&[mk(0.1), other]), Err(Error::Shape(_))));
    }

    #[test]
    fn pooled_window_scoring() {
        let mut r = AccuracyReport::default();
        let times = [5, 5, 6, 6];
        let y = [Some(1), Some(0), Some(1), None];
        let p = [0.8, 0.3, 0.6, 0.9];
        r.score_binary("M", "Y1", &Window::per_time_and_pooled(5, 6), &times, &y, &p).unwrap();
        assert!((r.get("M", "Y1", "5 to 6", Measure::Epcp).unwrap() - 0.7).abs() < 1e-15);
        assert!(r.get("M", "Y1", "6", Measure::Auroc).unwrap().is_nan());
        let agg = aggregate(&[r.clone(), r]).unwrap();
        let csv = agg.to_csv();
        assert!(csv.contains("M,Y1,5 to 6,ePCP,0.700000,0.000000,0.000000,2"));
        assert!(agg.pretty().contains("5 to 6"));
    }

    proptest! {
        #[test]
        fn auroc_rank_invariant(p in proptest::collection::vec(0.001f64..0.999, 4..40), seed in 0u64..1000) {
            let y: Vec<u8> = (0..p.len()).map(|i| ((seed >> (i % 10)) as usize + i) as u8 % 2).collect();
            prop_assume!(y.contains(&0) && y.contains(&1));
            let a = auroc(&y, &p).unwrap();
            let transformed: Vec<f64> = p.iter().map(|v| (v / (1.0 - v)).ln() * 3.0 + 1.0).collect();
            prop_assert!((a - auroc(&y, &transformed).unwrap()).abs() < 1e-12);
            let mut sorted = p.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if sorted.windows(2).all(|w| w[0] != w[1]) {
                let flipped: Vec<f64> = p.iter().map(|v| 1.0 - v).collect();
                prop_assert!((a + auroc(&y, &flipped).unwrap() - 1.0).abs() < 1e-12);
            }
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn epcp_linear(p1 in proptest::collection::vec(0.0f64..1.0, 1..30), shift in 0.0f64..1.0) {
            let y: Vec<u8> = (0..p1.len()).map(|i| (i % 3 == 0) as u8).collect();
            let p2: Vec<f64> = p1.iter().map(|v| (v + shift) % 1.0).collect();
            let mid: Vec<f64> = p1.iter().zip(&p2).map(|(a, b)| (a + b) / 2.0).collect();
            let lhs = epcp(&y, &mid).unwrap();
            let rhs = (epcp(&y, &p1).unwrap() + epcp(&y, &p2).unwrap()) / 2.0;
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn mase_naive_on_random_walk_is_one() {
        use rand::Rng;
        use rand_distr::StandardNormal;
        let mut rng = crate::numerics::rng_from_seed(3);
        let (mut num, mut den) = (0.0, 0.0);
        for _ in 0..2000 {
            let mut walk = vec![0.0f64];
            for _ in 0..9 {
                let step: f64 = rng.sample(StandardNormal);
                walk.push(walk.last().unwrap() + step);
            }
            let scale = naive_scale(&walk[..8]).unwrap();
            // in-sample naive one-step errors over the same history
            let x: Vec<f64> = walk[1..8].to_vec();
            let xhat: Vec<f64> = walk[..7].to_vec();
            num += mase(&x, &xhat, &vec![scale; x.len()]).unwrap();
            den += 1.0;
        }
        assert!((num / den - 1.0).abs() < 1e-12);
    }
}
