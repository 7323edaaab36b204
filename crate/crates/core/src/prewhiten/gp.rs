//! Separable Gaussian-process machinery: Matern-3/2 spatial factor (dense
//! eigendecomposition, or a low-rank RFF basis past a size limit) times an
//! AR(1) temporal factor, plus independent noise. Everything reduces to
//! elementwise work on the factor spectra.

use ndarray::prelude::*;

use crate::kernels::{matern32_kernel, rff_features, sample_rff_matern32};
use crate::linalg::{sym_eigen, LinalgError};

/// Orthonormal spatial basis with eigenvalues: either the full spectrum of
/// the dense Matern correlation matrix, or the spectrum of a rank-limited
/// RFF approximation.
pub(crate) struct SpatialBasis {
    /// `n_s x r`, orthonormal columns.
    pub vectors: Array2<f64>,
    /// `r` non-negative eigenvalues.
    pub lambdas: Array1<f64>,
    pub n_total: usize,
}

impl SpatialBasis {
    pub fn dense(coords: &[[f64; 2]], rho: f64) -> Result<Self, LinalgError> {
        let n = coords.len();
        let mut c = Array2::zeros((n, n));
        for i in 0..n {
            c[(i, i)] = 1.0;
            for j in (i + 1)..n {
                let k = matern32_kernel(&coords[i], &coords[j], rho);
                c[(i, j)] = k;
                c[(j, i)] = k;
            }
        }
        let (lambdas, vectors) = sym_eigen(&c)?;
        // numerical floor: correlation matrices are PSD
        let lambdas = lambdas.mapv(|v| v.max(0.0));
        Ok(Self {
            vectors,
            lambdas,
            n_total: n,
        })
    }

    /// Rank-`2 d` approximation through Matern-3/2 random Fourier features.
    pub fn low_rank(
        coords: &[[f64; 2]],
        rho: f64,
        d: usize,
        seed: u64,
    ) -> Result<Self, LinalgError> {
        let n = coords.len();
        let map = sample_rff_matern32(rho, d, 2, seed);
        let mut phi = Array2::zeros((n, map.feature_dim()));
        for (i, xy) in coords.iter().enumerate() {
            phi.row_mut(i).assign(&rff_features(xy, &map));
        }
        // eigenvectors of phi phi^T from the small Gram phi^T phi
        let gram = phi.t().dot(&phi);
        let (s, v) = sym_eigen(&gram)?;
        let mut vectors_cols = Vec::new();
        let mut lambdas = Vec::new();
        for (k, &sk) in s.iter().enumerate().rev() {
            if sk > 1e-10 {
                let col = phi.dot(&v.column(k).to_owned()) / sk.sqrt();
                vectors_cols.push(col);
                lambdas.push(sk);
            }
        }
        let r = lambdas.len();
        let mut vectors = Array2::zeros((n, r));
        for (k, col) in vectors_cols.iter().enumerate() {
            vectors.column_mut(k).assign(col);
        }
        Ok(Self {
            vectors,
            lambdas: Array1::from(lambdas),
            n_total: n,
        })
    }

    pub fn rank(&self) -> usize {
        self.lambdas.len()
    }
}

/// Eigendecomposition of the AR(1) correlation matrix `phi^|i-j|`.
pub(crate) fn ar1_eigen(n_t: usize, phi: f64) -> Result<(Array1<f64>, Array2<f64>), LinalgError> {
    assert!(phi.abs() < 1.0);
    let mut c = Array2::zeros((n_t, n_t));
    for i in 0..n_t {
        for j in 0..n_t {
            c[(i, j)] = phi.powi((i as i32 - j as i32).abs());
        }
    }
    let (vals, vecs) = sym_eigen(&c)?;
    Ok((vals.mapv(|v| v.max(0.0)), vecs))
}

/// Data transformed onto the factor bases, ready for repeated
/// `(sigma_s^2, sigma_n^2)` evaluations.
pub(crate) struct KronGp {
    /// `r x n_t` transformed data.
    ytilde: Array2<f64>,
    /// transformed all-ones vector, spatial / temporal parts
    u1: Array1<f64>,
    v1: Array1<f64>,
    lambdas_s: Array1<f64>,
    lambdas_t: Array1<f64>,
    sum_y: f64,
    sum_sq_y: f64,
    n: usize,
    rank: usize,
}

impl KronGp {
    pub fn new(
        basis: &SpatialBasis,
        lambdas_t: &Array1<f64>,
        qt: &Array2<f64>,
        y: &Array2<f64>,
    ) -> Self {
        let n_t = y.ncols();
        assert_eq!(basis.n_total, y.nrows());
        assert_eq!(lambdas_t.len(), n_t);
        let uty = basis.vectors.t().dot(y);
        let ytilde = uty.dot(qt);
        let u1 = basis.vectors.t().dot(&Array1::ones(y.nrows()));
        let v1 = qt.t().dot(&Array1::ones(n_t));
        KronGp {
            ytilde,
            u1,
            v1,
            lambdas_s: basis.lambdas.clone(),
            lambdas_t: lambdas_t.clone(),
            sum_y: y.sum(),
            sum_sq_y: y.iter().map(|v| v * v).sum(),
            n: y.len(),
            rank: basis.rank() * n_t,
        }
    }

    fn spectrum(&self, sigma_s2: f64, sigma_n2: f64) -> Array2<f64> {
        let r = self.lambdas_s.len();
        let n_t = self.lambdas_t.len();
        Array2::from_shape_fn((r, n_t), |(i, j)| {
            sigma_s2 * self.lambdas_s[i] * self.lambdas_t[j] + sigma_n2
        })
    }

    /// Generalized-least-squares intercept under the current spectrum.
    pub fn gls_mean(&self, sigma_s2: f64, sigma_n2: f64) -> f64 {
        let d = self.spectrum(sigma_s2, sigma_n2);
        let mut ones_norm2 = 0.0;
        let mut quad_ones = 0.0;
        let mut dot_basis = 0.0;
        let mut dot_full = self.sum_y;
        for (i, &u) in self.u1.iter().enumerate() {
            for (j, &v) in self.v1.iter().enumerate() {
                let o = u * v;
                ones_norm2 += o * o;
                quad_ones += o * o / d[(i, j)];
                dot_basis += o * self.ytilde[(i, j)];
            }
        }
        dot_full -= dot_basis;
        let a = (self.n as f64 - ones_norm2) / sigma_n2 + quad_ones;
        let mut b = dot_full / sigma_n2;
        for (i, &u) in self.u1.iter().enumerate() {
            for (j, &v) in self.v1.iter().enumerate() {
                b += u * v * self.ytilde[(i, j)] / d[(i, j)];
            }
        }
        b / a
    }

    /// Negative log marginal likelihood with the GLS intercept profiled out.
    pub fn nlml(&self, sigma_s2: f64, sigma_n2: f64) -> f64 {
        let mu = self.gls_mean(sigma_s2, sigma_n2);
        let d = self.spectrum(sigma_s2, sigma_n2);
        // centered statistics
        let sum_sq_c = self.sum_sq_y - 2.0 * mu * self.sum_y + mu * mu * self.n as f64;
        let mut basis_norm2 = 0.0;
        let mut quad_basis = 0.0;
        let mut log_det = 0.0;
        for i in 0..d.nrows() {
            for j in 0..d.ncols() {
                let yc = self.ytilde[(i, j)] - mu * self.u1[i] * self.v1[j];
                basis_norm2 += yc * yc;
                quad_basis += yc * yc / d[(i, j)];
                log_det += d[(i, j)].ln();
            }
        }
        log_det += (self.n - self.rank) as f64 * sigma_n2.ln();
        let quad = (sum_sq_c - basis_norm2) / sigma_n2 + quad_basis;
        0.5 * (quad + log_det + self.n as f64 * (2.0 * std::f64::consts::PI).ln())
    }

    /// Residual `sigma_n^2 K^{-1} (y - mu)` mapped back to data space,
    /// returned as the `r x n_t` basis coefficients plus the dense part.
    /// The caller reconstructs `residual = y_c + U M Q_t^T` where
    /// `M = (sigma_n^2 / d - 1) .* Ytilde_c`.
    pub fn residual_parts(&self, sigma_s2: f64, sigma_n2: f64) -> (f64, Array2<f64>) {
        let mu = self.gls_mean(sigma_s2, sigma_n2);
        let d = self.spectrum(sigma_s2, sigma_n2);
        let mut m = Array2::zeros(d.dim());
        for i in 0..d.nrows() {
            for j in 0..d.ncols() {
                let yc = self.ytilde[(i, j)] - mu * self.u1[i] * self.v1[j];
                m[(i, j)] = (sigma_n2 / d[(i, j)] - 1.0) * yc;
            }
        }
        (mu, m)
    }
}
