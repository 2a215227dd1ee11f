use super::Mat;
use crate::error::{Error, Result};

/// Lower-triangular factor `L` with `S = L·Lᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Cholesky {
    lower: Mat,
}

impl Cholesky {
    pub fn factor(s: &Mat) -> Result<Self> {
        let n = s.rows();
        if s.cols() != n {
            return Err(Error::shape(format!("cholesky of {}x{}", s.rows(), s.cols())));
        }
        for i in 0..n {
            for j in 0..i {
                if (s.get(i, j) - s.get(j, i)).abs() > 1e-9 {
                    return Err(Error::contract(format!("matrix not symmetric at ({i},{j})")));
                }
            }
        }
        let mut l = Mat::zeros(n, n);
        for j in 0..n {
            let mut diag = s.get(j, j);
            for k in 0..j {
                diag -= l.get(j, k) * l.get(j, k);
            }
            if !(diag > 0.0) {
                return Err(Error::Singular { pivot: j, value: diag });
            }
            let ljj = diag.sqrt();
            l.set(j, j, ljj);
            for i in j + 1..n {
                let mut v = s.get(i, j);
                for k in 0..j {
                    v -= l.get(i, k) * l.get(j, k);
                }
                l.set(i, j, v / ljj);
            }
        }
        Ok(Cholesky { lower: l })
    }

    pub fn lower(&self) -> &Mat {
        &self.lower
    }

    pub fn dim(&self) -> usize {
        self.lower.rows()
    }

    /// Solves `S·x = v` by forward then backward substitution.
    pub fn solve(&self, v: &[f64]) -> Result<Vec<f64>> {
        let y = self.forward_substitute(v)?;
        let n = self.dim();
        let l = &self.lower;
        let mut x = y;
        for i in (0..n).rev() {
            let mut acc = x[i];
            for k in i + 1..n {
                acc -= l.get(k, i) * x[k];
            }
            x[i] = acc / l.get(i, i);
        }
        Ok(x)
    }

    /// Solves `L·y = v`. `‖y‖²` is the quadratic form `vᵀ S⁻¹ v`.
    pub fn forward_substitute(&self, v: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim();
        if v.len() != n {
            return Err(Error::shape(format!("rhs of length {} for dimension {n}", v.len())));
        }
        let l = &self.lower;
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut acc = v[i];
            for k in 0..i {
                acc -= l.get(i, k) * y[k];
            }
            y[i] = acc / l.get(i, i);
        }
        Ok(y)
    }

    /// `log|S| = 2 Σ log L_ii`.
    pub fn logdet(&self) -> f64 {
        2.0 * (0..self.dim()).map(|i| self.lower.get(i, i).ln()).sum::<f64>()
    }
}

/// Solves `S·x = v` and returns `log|S|` alongside.
pub fn cholesky_solve_logdet(s: &Mat, v: &[f64]) -> Result<(Vec<f64>, f64)> {
    let chol = Cholesky::factor(s)?;
    Ok((chol.solve(v)?, chol.logdet()))
}
