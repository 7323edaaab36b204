//! Thin wrappers over LAPACK-backed decompositions used across the crate.

use ndarray::prelude::*;
use ndarray_linalg::{Cholesky, Eigh, SolveTriangular, UPLO};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix is not positive definite (Cholesky failed): {0}")]
    NotPositiveDefinite(String),
    #[error("symmetric eigendecomposition failed: {0}")]
    EigFailed(String),
}

/// Cholesky factor (lower) of a symmetric positive definite matrix.
pub struct CholFactor {
    lower: Array2<f64>,
}

impl CholFactor {
    pub fn new(spd: &Array2<f64>) -> Result<Self, LinalgError> {
        let lower = spd
            .cholesky(UPLO::Lower)
            .map_err(|e| LinalgError::NotPositiveDefinite(e.to_string()))?;
        Ok(Self { lower })
    }

    /// Solve A x = b for one right-hand side.
    pub fn solve_vec(&self, b: &Array1<f64>) -> Array1<f64> {
        let y = self
            .lower
            .solve_triangular(UPLO::Lower, ndarray_linalg::Diag::NonUnit, b)
            .expect("triangular solve");
        self.lower
            .t()
            .solve_triangular(UPLO::Upper, ndarray_linalg::Diag::NonUnit, &y)
            .expect("triangular solve")
    }

    /// Solve A X = B for a matrix of right-hand sides.
    pub fn solve_mat(&self, b: &Array2<f64>) -> Array2<f64> {
        let y = self
            .lower
            .solve_triangular(UPLO::Lower, ndarray_linalg::Diag::NonUnit, b)
            .expect("triangular solve");
        self.lower
            .t()
            .solve_triangular(UPLO::Upper, ndarray_linalg::Diag::NonUnit, &y)
            .expect("triangular solve")
    }

    /// log det A = 2 Σ log L_ii.
    pub fn log_det(&self) -> f64 {
        2.0 * self.lower.diag().iter().map(|v| v.ln()).sum::<f64>()
    }

    pub fn lower(&self) -> &Array2<f64> {
        &self.lower
    }
}

/// Eigendecomposition of a symmetric matrix: `a = q diag(vals) q^T`.
pub fn sym_eigen(a: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>), LinalgError> {
    let (vals, vecs) = a
        .eigh(UPLO::Lower)
        .map_err(|e| LinalgError::EigFailed(e.to_string()))?;
    Ok((vals, vecs))
}

/// Column means of a matrix.
pub fn col_means(m: &ArrayView2<f64>) -> Array1<f64> {
    let n = m.nrows() as f64;
    m.sum_axis(Axis(0)) / n
}

/// Subtract column means in place.
pub fn center_columns(m: &mut Array2<f64>) {
    let means = col_means(&m.view());
    for mut row in m.rows_mut() {
        row -= &means;
    }
}

/// Pearson correlation; `None` if either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    if n < 2.0 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn cholesky_solves_spd_system() {
        let a = array![[4.0, 1.0, 0.0], [1.0, 3.0, 0.5], [0.0, 0.5, 2.0]];
        let chol = CholFactor::new(&a).unwrap();
        let b = array![1.0, 2.0, 3.0];
        let x = chol.solve_vec(&b);
        let back = a.dot(&x);
        for i in 0..3 {
            assert_abs_diff_eq!(back[i], b[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(CholFactor::new(&a).is_err());
    }

    #[test]
    fn log_det_matches_eigenvalues() {
        let a = array![[4.0, 1.0], [1.0, 3.0]];
        let chol = CholFactor::new(&a).unwrap();
        let (vals, _) = sym_eigen(&a).unwrap();
        let ld: f64 = vals.iter().map(|v| v.ln()).sum();
        assert_abs_diff_eq!(chol.log_det(), ld, epsilon = 1e-12);
    }

    #[test]
    fn eigen_reconstructs() {
        let a = array![[2.0, 0.3, 0.1], [0.3, 1.5, 0.2], [0.1, 0.2, 1.0]];
        let (vals, q) = sym_eigen(&a).unwrap();
        let recon = q.dot(&Array2::from_diag(&vals)).dot(&q.t());
        for (x, y) in a.iter().zip(recon.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn pearson_basics() {
        let x = [1.0, 2.0, 3.0];
        assert_abs_diff_eq!(pearson(&x, &[2.0, 4.0, 6.0]).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pearson(&x, &[3.0, 2.0, 1.0]).unwrap(), -1.0, epsilon = 1e-12);
        assert!(pearson(&x, &[5.0, 5.0, 5.0]).is_none());
    }
}
