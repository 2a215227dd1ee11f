//! Softmax calculus and the classification loss.

use super::Mat;
use crate::error::{Error, Result};

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(z: &Mat) -> Mat {
    let mut out = z.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let mut out = z.to_vec();
    softmax_in_place(&mut out);
    out
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Jacobian of softmax at the probability row `a`:
/// `J[s][t] = a_s(δ_st − a_t)`.
pub fn softmax_row_jacobian(a: &[f64]) -> Result<Mat> {
    let total: f64 = a.iter().sum();
    if a.iter().any(|&v| v < 0.0 || !v.is_finite()) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!("softmax jacobian needs a probability row (sum = {total})")));
    }
    let n = a.len();
    Ok(Mat::from_fn(n, n, |s, t| if s == t { a[s] * (1.0 - a[s]) } else { -a[s] * a[t] }))
}

/// Pulls an upstream gradient on softmax outputs back to the logits, one row
/// at a time: `dz_s = a_s (da_s − Σ_t a_t da_t)`. Equivalent to `J · da`.
pub fn softmax_rows_backward(a: &Mat, da: &Mat) -> Mat {
    debug_assert_eq!(a.shape(), da.shape());
    let mut dz = Mat::zeros(a.rows(), a.cols());
    for i in 0..a.rows() {
        let (ar, dar) = (a.row(i), da.row(i));
        let inner: f64 = ar.iter().zip(dar).map(|(p, g)| p * g).sum();
        for (o, (p, g)) in dz.row_mut(i).iter_mut().zip(ar.iter().zip(dar)) {
            *o = p * (g - inner);
        }
    }
    dz
}

/// Cross-entropy of `softmax(logits)` against `label`, with its gradient on
/// the logits.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::Index { index: label, len: logits.len() });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    let loss = log_sum - logits[label];
    let mut grad: Vec<f64> = logits.iter().map(|z| (z - log_sum).exp()).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}
