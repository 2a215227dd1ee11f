//! Accuracy grid and the Transfer / Avg / Last summaries.

use crate::error::{Error, Result};

/// `p[i][j]`: accuracy on task `j` after training through task `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyMatrix {
    n: usize,
    p: Vec<f64>,
}

impl AccuracyMatrix {
    pub fn zeros(n: usize) -> Self {
        AccuracyMatrix { n, p: vec![0.0; n * n] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::shape("accuracy matrix must be square"));
        }
        if let Some(v) = rows.iter().flatten().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("accuracy {v} outside [0, 1]")));
        }
        Ok(AccuracyMatrix { n, p: rows.concat() })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, trained: usize, eval: usize) -> f64 {
        self.p[trained * self.n + eval]
    }

    pub fn set(&mut self, trained: usize, eval: usize, acc: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&acc) {
            return Err(Error::contract(format!("accuracy {acc} outside [0, 1]")));
        }
        self.p[trained * self.n + eval] = acc;
        Ok(())
    }

    pub fn row(&self, trained: usize) -> &[f64] {
        &self.p[trained * self.n..(trained + 1) * self.n]
    }
}

/// Per-task values (indexed by task) and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricSummary {
    /// `(task index, value)` pairs.
    pub per_task: Vec<(usize, f64)>,
    pub aggregate: f64,
}

impl MetricSummary {
    fn from_pairs(per_task: Vec<(usize, f64)>) -> Self {
        let aggregate = per_task.iter().map(|(_, v)| v).sum::<f64>() / per_task.len() as f64;
        MetricSummary { per_task, aggregate }
    }

    pub fn values(&self) -> Vec<f64> {
        self.per_task.iter().map(|(_, v)| *v).collect()
    }
}

/// Mean accuracy on task `j` over the steps before it was trained,
/// for `j = 1..N` (0-based).
pub fn metric_transfer(p: &AccuracyMatrix) -> Result<MetricSummary> {
    if p.n < 2 {
        return Err(Error::contract("transfer needs at least two tasks"));
    }
    let pairs = (1..p.n).map(|j| (j, (0..j).map(|i| p.get(i, j)).sum::<f64>() / j as f64)).collect();
    Ok(MetricSummary::from_pairs(pairs))
}

/// Mean accuracy on task `j` across all `N` steps.
pub fn metric_avg(p: &AccuracyMatrix) -> Result<MetricSummary> {
    if p.n == 0 {
        return Err(Error::contract("empty accuracy matrix"));
    }
    let pairs = (0..p.n).map(|j| (j, (0..p.n).map(|i| p.get(i, j)).sum::<f64>() / p.n as f64)).collect();
    Ok(MetricSummary::from_pairs(pairs))
}

/// Accuracy on each task after the final step.
pub fn metric_last(p: &AccuracyMatrix) -> Result<MetricSummary> {
    if p.n == 0 {
        return Err(Error::contract("empty accuracy matrix"));
    }
    Ok(MetricSummary::from_pairs(p.row(p.n - 1).iter().copied().enumerate().collect()))
}
