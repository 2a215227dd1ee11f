//! Per-task feature Gaussians, log-density scoring, task selection and the
//! sigmoid calibration weight; plus cosine key matching as the prompt-pool
//! baseline.

use std::f64::consts::PI;

use crate::backbone::argmax;
use crate::error::{Error, Result};
use crate::numkernel::{dot, norm, Cholesky, Mat};

pub const DEFAULT_RIDGE: f64 = 1e-7;
/// Largest ridge tried before giving up on a covariance.
pub const MAX_RIDGE: f64 = 1e-3;

/// Gaussian `N(μ, Σ)` over frozen image features of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskGaussian {
    mean: Vec<f64>,
    cov: Mat,
    ridge: f64,
    chol: Cholesky,
    logdet: f64,
}

impl TaskGaussian {
    /// Rebuilds a Gaussian from stored parameters; `cov` already includes the
    /// ridge.
    pub fn from_parts(mean: Vec<f64>, cov: Mat, ridge: f64) -> Result<Self> {
        if cov.shape() != (mean.len(), mean.len()) {
            return Err(Error::shape(format!("covariance {:?} for mean of length {}", cov.shape(), mean.len())));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("non-finite mean"));
        }
        let chol = Cholesky::factor(&cov)?;
        let logdet = chol.logdet();
        Ok(TaskGaussian { mean, cov, ridge, chol, logdet })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Covariance including the ridge.
    pub fn cov(&self) -> &Mat {
        &self.cov
    }

    /// Ridge actually applied (after any escalation).
    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Squared Mahalanobis distance `(x−μ)ᵀ Σ⁻¹ (x−μ)`.
    pub fn mahalanobis_sq(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::shape(format!("point of length {} for dimension {}", x.len(), self.dim())));
        }
        let diff: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        let y = self.chol.forward_substitute(&diff)?;
        Ok(dot(&y, &y))
    }
}

/// Mean and population covariance of the rows of `features`, plus
/// `ridge·I`. The ridge is multiplied by ten until the factorization succeeds
/// or it exceeds [`MAX_RIDGE`].
pub fn fit_gaussian(features: &Mat, ridge: f64) -> Result<TaskGaussian> {
    let (n, d) = features.shape();
    if n == 0 || d == 0 {
        return Err(Error::contract("need at least one feature row"));
    }
    if !(ridge >= 0.0) {
        return Err(Error::contract(format!("ridge {ridge} must be non-negative")));
    }
    let mean = features.column_means();
    let mut scatter = Mat::zeros(d, d);
    for row in features.row_iter() {
        let diff: Vec<f64> = row.iter().zip(&mean).map(|(a, b)| a - b).collect();
        for i in 0..d {
            let di = diff[i];
            let out = scatter.row_mut(i);
            for j in 0..d {
                out[j] += di * diff[j];
            }
        }
    }
    let scatter = scatter.scale(1.0 / n as f64);

    let mut current = ridge;
    loop {
        let mut cov = scatter.clone();
        for i in 0..d {
            cov.set(i, i, cov.get(i, i) + current);
        }
        match TaskGaussian::from_parts(mean.clone(), cov, current) {
            Ok(g) => return Ok(g),
            Err(Error::Singular { pivot, value }) => {
                let next = if current == 0.0 { DEFAULT_RIDGE } else { current * 10.0 };
                if next > MAX_RIDGE * (1.0 + 1e-9) {
                    return Err(Error::Singular { pivot, value });
                }
                current = next;
            }
            Err(e) => return Err(e),
        }
    }
}

/// `log N(x; μ, Σ) = −½[(x−μ)ᵀΣ⁻¹(x−μ) + d·log 2π + log|Σ|]`.
pub fn log_density(g: &TaskGaussian, x: &[f64]) -> Result<f64> {
    let maha = g.mahalanobis_sq(x)?;
    Ok(-0.5 * (maha + g.dim() as f64 * (2.0 * PI).ln() + g.logdet))
}

/// Best-scoring task and its score. Ties go to the lowest index.
pub fn select_task(gaussians: &[TaskGaussian], x: &[f64]) -> Result<(usize, f64)> {
    if gaussians.is_empty() {
        return Err(Error::contract("no task distributions to select from"));
    }
    let scores = gaussians.iter().map(|g| log_density(g, x)).collect::<Result<Vec<_>>>()?;
    let best = argmax(&scores);
    Ok((best, scores[best]))
}

/// `σ(a·S + b)`.
pub fn calibration_weight(score: f64, prescale_a: f64, prescale_b: f64) -> f64 {
    sigmoid(prescale_a * score + prescale_b)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Index of the key with the largest cosine similarity to `feature`.
pub fn key_match(keys: &Mat, feature: &[f64]) -> Result<usize> {
    if keys.rows() == 0 {
        return Err(Error::contract("no keys to match"));
    }
    if keys.cols() != feature.len() {
        return Err(Error::shape(format!("keys have {} columns, feature {}", keys.cols(), feature.len())));
    }
    for (i, v) in std::iter::once(feature).chain(keys.row_iter()).enumerate() {
        let n = norm(v);
        if (n - 1.0).abs() > 1e-9 {
            let what = if i == 0 { "feature".to_string() } else { format!("key {}", i - 1) };
            return Err(Error::contract(format!("{what} has norm {n}, expected 1")));
        }
    }
    let sims: Vec<f64> = keys.row_iter().map(|k| dot(k, feature)).collect();
    Ok(argmax(&sims))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::{normalized, Rng};

    fn unit_gaussian(mean: Vec<f64>) -> TaskGaussian {
        let d = mean.len();
        TaskGaussian::from_parts(mean, Mat::identity(d), 0.0).unwrap()
    }

    #[test]
    fn two_point_fit() {
        let f = Mat::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        let g = fit_gaussian(&f, 1e-7).unwrap();
        assert_eq!(g.mean(), &[1.0, 0.0]);
        assert_eq!(g.cov().data(), &[1.0 + 1e-7, 0.0, 0.0, 1e-7]);
    }

    #[test]
    fn single_row_gives_ridge_identity() {
        let f = Mat::from_rows(&[vec![0.3, -1.2, 4.0]]).unwrap();
        let g = fit_gaussian(&f, 1e-7).unwrap();
        assert_eq!(g.mean(), f.row(0));
        let expect = Mat::identity(3).scale(1e-7);
        assert_eq!(g.cov(), &expect);
        assert_eq!(g.ridge(), 1e-7);
    }

    #[test]
    fn ridge_escalates_on_rank_deficiency() {
        // Perfectly collinear rows at zero ridge cannot factor; escalation
        // starts from the default ridge.
        let f = Mat::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]]).unwrap();
        let g = fit_gaussian(&f, 0.0).unwrap();
        assert!(g.ridge() > 0.0);
    }

    #[test]
    fn gives_up_past_max_ridge() {
        // At this magnitude every ridge up to the cap is below one ulp of the
        // scatter, so the second pivot stays exactly zero.
        let a = 1e9;
        let f = Mat::from_rows(&[vec![a, a], vec![-a, -a]]).unwrap();
        assert!(matches!(fit_gaussian(&f, 1e-7), Err(Error::Singular { pivot: 1, .. })));
        assert!(matches!(fit_gaussian(&f, -1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn standard_normal_at_mean() {
        let g = unit_gaussian(vec![0.0]);
        let s = log_density(&g, &[0.0]).unwrap();
        assert!((s + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
        assert!((s + 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn at_mean_mahalanobis_vanishes() {
        let cov = Mat::from_rows(&[vec![2.0, 0.3], vec![0.3, 0.5]]).unwrap();
        let g = TaskGaussian::from_parts(vec![1.0, -1.0], cov, 0.0).unwrap();
        assert_eq!(g.mahalanobis_sq(&[1.0, -1.0]).unwrap(), 0.0);
        let s = log_density(&g, &[1.0, -1.0]).unwrap();
        assert!((s + 0.5 * (2.0 * (2.0 * PI).ln() + g.logdet())).abs() < 1e-14);
    }

    #[test]
    fn selection() {
        let g = unit_gaussian(vec![0.5, 0.5]);
        let (i, s) = select_task(std::slice::from_ref(&g), &[0.0, 0.0]).unwrap();
        assert_eq!(i, 0);
        assert_eq!(s, log_density(&g, &[0.0, 0.0]).unwrap());

        let (i, _) = select_task(&[g.clone(), g.clone()], &[1.0, 2.0]).unwrap();
        assert_eq!(i, 0);

        let left = unit_gaussian(vec![-3.0, 0.0, 0.0]);
        let right = unit_gaussian(vec![3.0, 0.0, 0.0]);
        let x = [-1.0, 0.2, 0.1];
        let (i, s) = select_task(&[left.clone(), right.clone()], &x).unwrap();
        let (sl, sr) = (log_density(&left, &x).unwrap(), log_density(&right, &x).unwrap());
        assert!(sl > sr);
        assert_eq!((i, s), (0, sl));

        assert!(matches!(select_task(&[], &[0.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn calibration_values() {
        assert_eq!(calibration_weight(0.0, 1.0, 0.0), 0.5);
        assert!(calibration_weight(20.0, 1.0, 0.0) > 0.999_999);
        assert!(calibration_weight(-20.0, 1.0, 0.0) < 1e-8);
        let grid: Vec<f64> = (-300..=300).map(|i| i as f64 * 0.1).collect();
        for pair in grid.windows(2) {
            assert!(calibration_weight(pair[0], 1.0, 0.0) < calibration_weight(pair[1], 1.0, 0.0));
        }
        for s in [-1e4, -745.0, 745.0, 1e4] {
            let w = calibration_weight(s, 1.0, 0.0);
            assert!((0.0..=1.0).contains(&w));
        }
    }

    #[test]
    fn key_match_cases() {
        let keys = Mat::identity(2);
        let x = normalized(&[0.995, 0.1]);
        assert_eq!(key_match(&keys, &x).unwrap(), 0);
        assert_eq!(key_match(&keys, keys.row(1)).unwrap(), 1);
        assert!(matches!(key_match(&keys, &[2.0, 0.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn key_match_brute_force() {
        let mut rng = Rng::seed(4);
        for _ in 0..50 {
            let rows: Vec<Vec<f64>> = (0..6).map(|_| normalized(&(0..5).map(|_| rng.normal()).collect::<Vec<_>>())).collect();
            let keys = Mat::from_rows(&rows).unwrap();
            let x = normalized(&(0..5).map(|_| rng.normal()).collect::<Vec<_>>());
            let mut best = 0;
            let mut best_sim = f64::NEG_INFINITY;
            for (i, r) in rows.iter().enumerate() {
                let sim: f64 = (0..5).map(|c| r[c] * x[c]).sum();
                if sim > best_sim {
                    best_sim = sim;
                    best = i;
                }
            }
            assert_eq!(key_match(&keys, &x).unwrap(), best);
        }
    }
}
