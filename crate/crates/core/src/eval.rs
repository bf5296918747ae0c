//! Metrics: ABSC accuracy and Macro-F1, span and pair F1, average
//! performance, the forgetting matrix and the rank-sensitivity score.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::tasks::Polarity;

/// Accuracy and Macro-F1. `None` predictions (unparseable output) count as
/// wrong and never form a class of their own.
pub fn absc_metrics(predictions: &[Option<Polarity>], gold: &[Polarity]) -> Result<(f64, f64)> {
    if predictions.len() != gold.len() {
        return Err(Error::usage(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::degenerate("no predictions to score"));
    }
    let correct = predictions.iter().zip(gold).filter(|(p, g)| **p == Some(**g)).count();
    let accuracy = correct as f64 / gold.len() as f64;

    let classes: BTreeSet<Polarity> = gold.iter().copied().chain(predictions.iter().flatten().copied()).collect();
    let mut f1_sum = 0.0;
    for &c in &classes {
        let tp = predictions.iter().zip(gold).filter(|(p, g)| **p == Some(c) && **g == c).count();
        let fp = predictions.iter().zip(gold).filter(|(p, g)| **p == Some(c) && **g != c).count();
        let fn_ = predictions.iter().zip(gold).filter(|(p, g)| **p != Some(c) && **g == c).count();
        f1_sum += f1_from_counts(tp, fp, fn_);
    }
    Ok((accuracy, f1_sum / classes.len() as f64))
}

fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self { precision, recall, f1 }
    }
}

fn normalize(term: &str) -> String {
    term.trim().to_lowercase()
}

fn micro<T: Ord>(pred: &[BTreeSet<T>], gold: &[BTreeSet<T>]) -> Result<Prf> {
    if pred.len() != gold.len() {
        return Err(Error::usage(format!(
            "{} predicted sentences for {} gold sentences",
            pred.len(),
            gold.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g) in pred.iter().zip(gold) {
        let hit = p.intersection(g).count();
        tp += hit;
        fp += p.len() - hit;
        fn_ += g.len() - hit;
    }
    Ok(Prf::from_counts(tp, fp, fn_))
}

/// Micro-averaged exact match over case-folded, trimmed, de-duplicated terms.
pub fn span_f1<S: AsRef<str>>(predicted: &[Vec<S>], gold: &[Vec<S>]) -> Result<Prf> {
    let sets = |v: &[Vec<S>]| -> Vec<BTreeSet<String>> {
        v.iter().map(|s| s.iter().map(|t| normalize(t.as_ref())).collect()).collect()
    };
    micro(&sets(predicted), &sets(gold))
}

/// Micro-averaged exact match over `(term, polarity)` pairs.
pub fn joint_f1<S: AsRef<str>>(predicted: &[Vec<(S, Polarity)>], gold: &[Vec<(S, Polarity)>]) -> Result<Prf> {
    let sets = |v: &[Vec<(S, Polarity)>]| -> Vec<BTreeSet<(String, Polarity)>> {
        v.iter()
            .map(|s| s.iter().map(|(t, p)| (normalize(t.as_ref()), *p)).collect())
            .collect()
    };
    micro(&sets(predicted), &sets(gold))
}

/// Mean of a fully populated row.
pub fn average_performance(row: &[Option<f64>]) -> Result<f64> {
    if row.is_empty() {
        return Err(Error::usage("average over an empty row"));
    }
    let mut sum = 0.0;
    for (i, v) in row.iter().enumerate() {
        sum += v.ok_or_else(|| Error::usage(format!("missing entry for domain {i}")))?;
    }
    Ok(sum / row.len() as f64)
}

/// `N × N` grid: entry `(t, e)` is the metric on test domain `e` after
/// training through domain `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultMatrix {
    pub metric: String,
    pub domains: Vec<String>,
    values: Vec<Vec<Option<f64>>>,
}

impl ResultMatrix {
    pub fn new(metric: impl Into<String>, domains: Vec<String>) -> Self {
        let n = domains.len();
        Self {
            metric: metric.into(),
            domains,
            values: vec![vec![None; n]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn set(&mut self, trained: usize, tested: usize, value: f64) -> Result<()> {
        let n = self.len();
        if trained >= n || tested >= n {
            return Err(Error::usage(format!("entry ({trained}, {tested}) outside a {n}x{n} grid")));
        }
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::usage(format!("metric value {value} outside [0, 1]")));
        }
        self.values[trained][tested] = Some(value);
        Ok(())
    }

    pub fn get(&self, trained: usize, tested: usize) -> Option<f64> {
        self.values.get(trained)?.get(tested).copied().flatten()
    }

    pub fn row(&self, trained: usize) -> &[Option<f64>] {
        &self.values[trained]
    }

    pub fn final_row(&self) -> &[Option<f64>] {
        self.values.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn average_performance(&self) -> Result<f64> {
        average_performance(self.final_row())
    }

    /// Header `trained\tested,<domains…>`, one row per checkpoint; undefined
    /// entries are empty cells. Values are written in shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut s = self.metric.clone();
        for d in &self.domains {
            s.push(',');
            s.push_str(d);
        }
        s.push('\n');
        for (t, row) in self.values.iter().enumerate() {
            s.push_str(&self.domains[t]);
            for v in row {
                s.push(',');
                if let Some(v) = v {
                    s.push_str(&format!("{v:?}"));
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::format("empty result matrix"))?;
        let mut cells = header.split(',');
        let metric = cells.next().unwrap_or_default().to_string();
        let domains: Vec<String> = cells.map(str::to_string).collect();
        let mut m = ResultMatrix::new(metric, domains);
        let n = m.len();
        let mut count = 0;
        for (t, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            if t >= n || cells.len() != n + 1 || cells[0] != m.domains[t] {
                return Err(Error::format(format!("malformed result matrix row {}", t + 2)));
            }
            for (e, c) in cells[1..].iter().enumerate() {
                if c.is_empty() {
                    continue;
                }
                let v: f64 = c
                    .parse()
                    .map_err(|_| Error::format(format!("bad value `{c}` in row {}", t + 2)))?;
                m.set(t, e, v).map_err(|e| Error::format(e.to_string()))?;
            }
            count += 1;
        }
        if count != n {
            return Err(Error::format(format!("result matrix has {count} rows for {n} domains")));
        }
        Ok(m)
    }
}

/// Builds the grid from `(trained, tested, value)` records.
pub fn forgetting_matrix(
    metric: &str,
    domains: Vec<String>,
    records: &[(usize, usize, f64)],
) -> Result<ResultMatrix> {
    let mut m = ResultMatrix::new(metric, domains);
    for &(t, e, v) in records {
        m.set(t, e, v)?;
    }
    Ok(m)
}

/// Metric values of several rank settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    pub rows: Vec<String>,
    pub metrics: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl ScoreTable {
    pub fn new(rows: Vec<String>, metrics: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.len() != rows.len() || values.iter().any(|r| r.len() != metrics.len()) {
            return Err(Error::usage("score table dimensions disagree"));
        }
        Ok(Self { rows, metrics, values })
    }

    /// Header `rank,<metrics…>`, one line per row.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::format("empty score table"))?;
        let metrics: Vec<String> = header.split(',').skip(1).map(|s| s.trim().to_string()).collect();
        let mut rows = Vec::new();
        let mut values = Vec::new();
        for (k, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if cells.len() != metrics.len() + 1 {
                return Err(Error::format(format!("score table row {} has {} cells", k + 2, cells.len())));
            }
            rows.push(cells[0].to_string());
            values.push(
                cells[1..]
                    .iter()
                    .map(|c| {
                        c.parse::<f64>()
                            .map_err(|_| Error::format(format!("bad value `{c}` in row {}", k + 2)))
                    })
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        Self::new(rows, metrics, values)
    }

    /// Every row's score, or an error for tables that cannot be normalized.
    pub fn scores(&self) -> Result<Vec<f64>> {
        (0..self.rows.len()).map(|r| rank_score(self, r)).collect()
    }

    /// Input table with a trailing `score` column.
    pub fn to_csv_with_scores(&self) -> Result<String> {
        let scores = self.scores()?;
        let mut s = format!("rank,{},score\n", self.metrics.join(","));
        for ((name, vals), score) in self.rows.iter().zip(&self.values).zip(scores) {
            let cells: Vec<String> = vals.iter().map(|v| v.to_string()).collect();
            s.push_str(&format!("{name},{},{score:.4}\n", cells.join(",")));
        }
        Ok(s)
    }
}

/// Mean over metrics of the row's min-max normalized value. Columns whose
/// values are all equal are left out.
pub fn rank_score(table: &ScoreTable, row: usize) -> Result<f64> {
    if table.rows.len() < 2 {
        return Err(Error::usage("score needs at least two rows"));
    }
    if row >= table.rows.len() {
        return Err(Error::usage(format!("row {row} outside a table of {}", table.rows.len())));
    }
    let mut total = 0.0;
    let mut used = 0;
    for m in 0..table.metrics.len() {
        let col = table.values.iter().map(|r| r[m]);
        let min = col.clone().fold(f64::INFINITY, f64::min);
        let max = col.fold(f64::NEG_INFINITY, f64::max);
        if !(max > min) {
            continue;
        }
        total += (table.values[row][m] - min) / (max - min);
        used += 1;
    }
    if used == 0 {
        return Err(Error::degenerate("every score column is constant"));
    }
    Ok(total / used as f64)
}
