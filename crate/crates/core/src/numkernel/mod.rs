//! Dense linear algebra, softmax calculus, Cholesky factorization and a
//! central-difference gradient oracle. Everything here is a pure function of
//! its inputs.

mod cholesky;
mod mat;
mod ops;
mod rng;

pub use cholesky::{cholesky_solve_logdet, Cholesky};
pub use mat::{dot, norm, Mat};
pub use ops::{cross_entropy, softmax, softmax_row_jacobian, softmax_rows, softmax_rows_backward};
pub use rng::Rng;

/// Central-difference gradient of `f` at `theta`:
/// `(f(θ + h·eᵢ) − f(θ − h·eᵢ)) / 2h` for each coordinate.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, theta: &[f64], h: f64) -> Vec<f64> {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            probe[i] = theta[i] + h;
            let up = f(&probe);
            probe[i] = theta[i] - h;
            let down = f(&probe);
            probe[i] = theta[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// L2-normalized copy of `v`.
pub fn normalized(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    v.iter().map(|x| x / n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_square() {
        let g = finite_diff_grad(|t| t[0] * t[0], &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn fd_constant() {
        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0, 0.5], 1e-5);
        assert_eq!(g, vec![0.0; 3]);
    }
}
