//! CSV output for the accuracy grid and its summaries.

use std::fmt::Write as _;
use std::path::Path;

use super::metrics::{metric_avg, metric_last, metric_transfer, AccuracyMatrix, MetricSummary};
use crate::error::{Error, Result};

pub const GRID_FILE: &str = "grid.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

/// Transfer (absent for a single task), Avg and Last of one grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub transfer: Option<MetricSummary>,
    pub avg: MetricSummary,
    pub last: MetricSummary,
}

impl Metrics {
    pub fn of(p: &AccuracyMatrix) -> Result<Self> {
        let transfer = if p.n() >= 2 { Some(metric_transfer(p)?) } else { None };
        Ok(Metrics { transfer, avg: metric_avg(p)?, last: metric_last(p)? })
    }
}

pub fn grid_csv(p: &AccuracyMatrix) -> String {
    let mut out = String::from("trained_task,eval_task,accuracy\n");
    for i in 0..p.n() {
        for j in 0..p.n() {
            let _ = writeln!(out, "{i},{j},{:.6}", p.get(i, j));
        }
    }
    out
}

pub fn summary_csv(m: &Metrics) -> String {
    let mut out = String::from("metric,task,value\n");
    let named = [("transfer", m.transfer.as_ref()), ("avg", Some(&m.avg)), ("last", Some(&m.last))];
    for (name, summary) in named {
        let Some(s) = summary else { continue };
        for (task, v) in &s.per_task {
            let _ = writeln!(out, "{name},{task},{v:.6}");
        }
        let _ = writeln!(out, "{name},aggregate,{:.6}", s.aggregate);
    }
    out
}

/// Writes `grid.csv` and `summary.csv` into `dir`, creating it if needed.
pub fn write_csv(p: &AccuracyMatrix, m: &Metrics, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(GRID_FILE), grid_csv(p))?;
    std::fs::write(dir.join(SUMMARY_FILE), summary_csv(m))?;
    Ok(())
}

/// Parses a grid written by [`grid_csv`].
pub fn parse_grid(text: &str) -> Result<AccuracyMatrix> {
    let mut lines = text.lines();
    if lines.next() != Some("trained_task,eval_task,accuracy") {
        return Err(Error::Format("missing grid header".into()));
    }
    let mut cells = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let bad = || Error::Format(format!("bad grid row `{line}`"));
        let mut parts = line.split(',');
        let i: usize = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let j: usize = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let v: f64 = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        if parts.next().is_some() {
            return Err(bad());
        }
        cells.push((i, j, v));
    }
    let n = (cells.len() as f64).sqrt().round() as usize;
    if n * n != cells.len() {
        return Err(Error::Format(format!("{} cells do not form a square grid", cells.len())));
    }
    let mut rows = vec![vec![f64::NAN; n]; n];
    for (i, j, v) in cells {
        if i >= n || j >= n || !rows[i][j].is_nan() {
            return Err(Error::Format(format!("cell ({i}, {j}) out of range or repeated")));
        }
        rows[i][j] = v;
    }
    AccuracyMatrix::from_rows(&rows)
}

pub fn read_grid(path: impl AsRef<Path>) -> Result<AccuracyMatrix> {
    parse_grid(&std::fs::read_to_string(path)?)
}
