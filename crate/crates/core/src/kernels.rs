//! Gaussian kernels, median-heuristic bandwidths, random Fourier feature maps,
//! and weighted group embeddings for aggregated observations.
//!
//! The Gaussian kernel here is `exp(-||x-y||^2 / lambda^2)` (plain `lambda^2`
//! in the denominator, not `2 lambda^2`), so the matching spectral
//! distribution has per-coordinate variance `2 / lambda^2`.

use ndarray::prelude::*;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use thiserror::Error;

/// Median heuristic subsample cap; above this the pair count gets expensive.
const MEDIAN_SUBSAMPLE: usize = 2000;
/// Internal seed for the (deterministic) median-heuristic subsample.
const MEDIAN_SUBSAMPLE_SEED: u64 = 0x6d65646961;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("degenerate variable: all {0} samples identical")]
    DegenerateVariable(usize),
    #[error("need at least 2 samples for the median heuristic, got {0}")]
    TooFewSamples(usize),
    #[error("empty group cannot be embedded")]
    EmptyGroup,
    #[error("input dimension {got} does not match map dimension {expected}")]
    DimensionMismatch { got: usize, expected: usize },
}

/// A random Fourier feature map: `D` frequency vectors for inputs of a fixed
/// dimension. Feature vectors have length `2 D`.
#[derive(Debug, Clone)]
pub struct RffMap {
    /// `D x input_dim` frequency matrix.
    frequencies: Array2<f64>,
    /// Bandwidth (Gaussian) or range (Matern) the frequencies were drawn for.
    bandwidth: f64,
}

impl RffMap {
    pub fn num_frequencies(&self) -> usize {
        self.frequencies.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.frequencies.ncols()
    }

    /// Feature dimension, `2 D`.
    pub fn feature_dim(&self) -> usize {
        2 * self.num_frequencies()
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// Projection of `x` onto the `d`-th frequency vector.
    pub fn frequency_dot(&self, d: usize, x: &[f64]) -> f64 {
        self.frequencies
            .row(d)
            .iter()
            .zip(x)
            .map(|(v, xi)| v * xi)
            .sum()
    }
}

/// Euclidean distance between two points.
fn dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Median pairwise Euclidean distance between samples (rows).
///
/// A zero median falls back to the smallest nonzero pairwise distance. More
/// than `MEDIAN_SUBSAMPLE` rows are subsampled first (seed-fixed, so repeated
/// calls agree). All-identical samples are an error.
pub fn median_heuristic(samples: ArrayView2<'_, f64>) -> Result<f64, KernelError> {
    let n = samples.nrows();
    if n < 2 {
        return Err(KernelError::TooFewSamples(n));
    }

    let idx: Vec<usize> = if n > MEDIAN_SUBSAMPLE {
        let mut rng = ChaCha8Rng::seed_from_u64(MEDIAN_SUBSAMPLE_SEED);
        let mut all: Vec<usize> = (0..n).collect();
        // partial Fisher-Yates: first MEDIAN_SUBSAMPLE entries
        for i in 0..MEDIAN_SUBSAMPLE {
            let j = rng.random_range(i..n);
            all.swap(i, j);
        }
        all.truncate(MEDIAN_SUBSAMPLE);
        all
    } else {
        (0..n).collect()
    };

    let m = idx.len();
    let mut dists = Vec::with_capacity(m * (m - 1) / 2);
    for a in 0..m {
        let ra = samples.row(idx[a]);
        for b in (a + 1)..m {
            let rb = samples.row(idx[b]);
            dists.push(dist(ra.as_slice().unwrap(), rb.as_slice().unwrap()));
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if dists.len() % 2 == 1 {
        dists[dists.len() / 2]
    } else {
        0.5 * (dists[dists.len() / 2 - 1] + dists[dists.len() / 2])
    };
    if median > 0.0 {
        return Ok(median);
    }
    match dists.iter().find(|d| **d > 0.0) {
        Some(d) => Ok(*d),
        None => Err(KernelError::DegenerateVariable(n)),
    }
}

/// Median heuristic over scalar samples.
pub fn median_heuristic_scalar(values: &[f64]) -> Result<f64, KernelError> {
    let arr = ArrayView2::from_shape((values.len(), 1), values).unwrap();
    median_heuristic(arr)
}

/// `exp(-||x-y||^2 / lambda^2)`.
pub fn gaussian_kernel(x: &[f64], y: &[f64], bandwidth: f64) -> f64 {
    assert!(bandwidth > 0.0, "bandwidth must be positive");
    let d = dist(x, y);
    (-(d * d) / (bandwidth * bandwidth)).exp()
}

/// Matern-3/2 correlation with range `rho` scaled so that correlation is
/// roughly 0.1 at distance `rho` (exponential rate `sqrt(12)/rho`).
pub fn matern32_kernel(x: &[f64], y: &[f64], range: f64) -> f64 {
    assert!(range > 0.0, "range must be positive");
    let kd = 12f64.sqrt() / range * dist(x, y);
    (1.0 + kd) * (-kd).exp()
}

/// Sample a feature map for the Gaussian kernel with the given bandwidth:
/// frequencies i.i.d. `N(0, 2 / lambda^2)` per coordinate.
pub fn sample_rff(bandwidth: f64, d: usize, input_dim: usize, seed: u64) -> RffMap {
    assert!(bandwidth > 0.0, "bandwidth must be positive");
    assert!(d >= 1 && input_dim >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = std::f64::consts::SQRT_2 / bandwidth;
    let frequencies = Array2::from_shape_fn((d, input_dim), |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        sd * z
    });
    RffMap {
        frequencies,
        bandwidth,
    }
}

/// Sample a feature map for the Matern-3/2 kernel with the given range.
///
/// The spectral distribution is multivariate-t with 3 degrees of freedom:
/// `omega = kappa * z / sqrt(u)` with `z ~ N(0, I)`, `u ~ chi^2_3`, and
/// `kappa = sqrt(12) / range`.
pub fn sample_rff_matern32(range: f64, d: usize, input_dim: usize, seed: u64) -> RffMap {
    assert!(range > 0.0, "range must be positive");
    assert!(d >= 1 && input_dim >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kappa = 12f64.sqrt() / range;
    let chi2 = ChiSquared::new(3.0).unwrap();
    let mut frequencies = Array2::zeros((d, input_dim));
    for mut row in frequencies.rows_mut() {
        let u: f64 = chi2.sample(&mut rng);
        let scale = kappa / u.sqrt();
        for v in row.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = scale * z;
        }
    }
    RffMap {
        frequencies,
        bandwidth: range,
    }
}

/// `z(x) = (cos(v_1^T x), sin(v_1^T x), ..., cos(v_D^T x), sin(v_D^T x)) / sqrt(D)`.
pub fn rff_features(x: &[f64], map: &RffMap) -> Array1<f64> {
    assert_eq!(x.len(), map.input_dim(), "input dimension mismatch");
    let d = map.num_frequencies();
    let norm = 1.0 / (d as f64).sqrt();
    let mut z = Array1::zeros(2 * d);
    for (i, row) in map.frequencies.rows().into_iter().enumerate() {
        let proj: f64 = row.iter().zip(x).map(|(v, xi)| v * xi).sum();
        z[2 * i] = proj.cos() * norm;
        z[2 * i + 1] = proj.sin() * norm;
    }
    z
}

/// Weighted sum of feature vectors representing one group of fine-scale
/// observations: the RFF image of the empirical mean embedding.
#[derive(Debug, Clone)]
pub struct GroupEmbedding {
    pub features: Array1<f64>,
    pub total_weight: f64,
}

/// `z_mu = sum_l w_l z(x_l)` over the rows of `values`.
///
/// Inner products of group embeddings approximate the double-sum kernel
/// `k_mu(mu_i, mu_j) = sum_k sum_l w_i^k w_j^l k(x_i^k, x_j^l)`.
pub fn aggregate_features(
    values: ArrayView2<'_, f64>,
    weights: &[f64],
    map: &RffMap,
) -> Result<GroupEmbedding, KernelError> {
    if values.nrows() == 0 {
        return Err(KernelError::EmptyGroup);
    }
    if values.ncols() != map.input_dim() {
        return Err(KernelError::DimensionMismatch {
            got: values.ncols(),
            expected: map.input_dim(),
        });
    }
    assert_eq!(values.nrows(), weights.len(), "one weight per group member");
    debug_assert!(weights.iter().all(|w| w.is_finite() && *w >= 0.0));

    let mut features = Array1::zeros(map.feature_dim());
    for (row, &w) in values.rows().into_iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        features.scaled_add(w, &rff_features(row.as_slice().unwrap(), map));
    }
    Ok(GroupEmbedding {
        features,
        total_weight: weights.iter().sum(),
    })
}

/// Scalar-group convenience over `aggregate_features`.
pub fn aggregate_features_scalar(
    values: &[f64],
    weights: &[f64],
    map: &RffMap,
) -> Result<GroupEmbedding, KernelError> {
    let arr = ArrayView2::from_shape((values.len(), 1), values).unwrap();
    aggregate_features(arr, weights, map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn median_single_pair() {
        assert_abs_diff_eq!(median_heuristic_scalar(&[0.0, 1.0]).unwrap(), 1.0);
    }

    #[test]
    fn median_of_three() {
        // distances 1, 2, 3
        assert_abs_diff_eq!(median_heuristic_scalar(&[0.0, 1.0, 3.0]).unwrap(), 2.0);
    }

    #[test]
    fn median_of_standard_normals() {
        // |X - X'| ~ sqrt(2) |N(0,1)|, median = sqrt(2) * qnorm(0.75) = 0.9539.
        // (Monte Carlo oracle over 10^7 pairs agrees to 3 decimals.)
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let xs: Vec<f64> = (0..1000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let m = median_heuristic_scalar(&xs).unwrap();
        assert!((m - 0.9539).abs() < 0.1, "median {m}");
    }

    #[test]
    fn median_zero_falls_back_to_smallest_nonzero() {
        // pairs: |0-0| x3, |0-1| x3; median of (0,0,0,1,1,1) = 0.5 -> nonzero anyway.
        // Force a zero median with 4 zeros and one 1: 10 pairs, 6 zeros.
        let m = median_heuristic_scalar(&[0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_abs_diff_eq!(m, 1.0);
    }

    #[test]
    fn median_rejects_constant_variable() {
        assert!(matches!(
            median_heuristic_scalar(&[2.0; 10]),
            Err(KernelError::DegenerateVariable(_))
        ));
    }

    #[test]
    fn gaussian_kernel_values() {
        assert_abs_diff_eq!(gaussian_kernel(&[0.3], &[0.3], 2.0), 1.0);
        assert_abs_diff_eq!(
            gaussian_kernel(&[0.0], &[1.0], 1.0),
            (-1.0f64).exp(),
            epsilon = 1e-15
        );
        // |x-y| = lambda gives e^{-1} for any lambda
        for lambda in [0.1, 1.0, 7.5] {
            assert_abs_diff_eq!(
                gaussian_kernel(&[0.0], &[lambda], lambda),
                (-1.0f64).exp(),
                epsilon = 1e-15
            );
        }
    }

    #[test]
    fn rff_is_deterministic_given_seed() {
        let a = sample_rff(1.5, 64, 2, 99);
        let b = sample_rff(1.5, 64, 2, 99);
        assert_eq!(a.frequencies, b.frequencies);
        let c = sample_rff(1.5, 64, 2, 100);
        assert_ne!(a.frequencies, c.frequencies);
    }

    #[test]
    fn rff_frequency_variance_matches_spectral_density() {
        // per-coordinate variance 2 / lambda^2; lambda = 2 -> 0.5
        let map = sample_rff(2.0, 100_000, 1, 7);
        let v: f64 =
            map.frequencies.iter().map(|w| w * w).sum::<f64>() / map.num_frequencies() as f64;
        assert!((v - 0.5).abs() < 0.02, "variance {v}");
    }

    #[test]
    fn rff_feature_dim() {
        let map = sample_rff(1.0, 1, 3, 0);
        assert_eq!(map.feature_dim(), 2);
        assert_eq!(rff_features(&[0.1, 0.2, 0.3], &map).len(), 2);
    }

    #[test]
    fn rff_features_have_unit_norm_exactly() {
        let map = sample_rff(0.7, 33, 2, 5);
        for x in [[0.0, 0.0], [1.0, -2.0], [100.0, 3.5]] {
            let z = rff_features(&x, &map);
            let norm2: f64 = z.iter().map(|v| v * v).sum();
            assert_abs_diff_eq!(norm2, 1.0, epsilon = 1e-12);
            // z(x)^T z(x) = k(x, x) = 1
        }
    }

    #[test]
    fn rff_inner_product_approximates_gaussian_kernel() {
        // Average over 50 re-sampled maps at D = 2000.
        let (x, y, lambda) = ([0.4, -0.2], [-0.3, 0.5], 0.9);
        let exact = gaussian_kernel(&x, &y, lambda);
        let mut sum = 0.0;
        for seed in 0..50u64 {
            let map = sample_rff(lambda, 2000, 2, seed);
            sum += rff_features(&x, &map).dot(&rff_features(&y, &map));
        }
        let approx = sum / 50.0;
        assert!((approx - exact).abs() < 0.02, "approx {approx} exact {exact}");
    }

    #[test]
    fn matern_rff_inner_product_approximates_matern_kernel() {
        let (x, y, range) = ([0.0], [1.3], 4.0);
        let exact = matern32_kernel(&x, &y, range);
        let mut sum = 0.0;
        for seed in 0..50u64 {
            let map = sample_rff_matern32(range, 2000, 1, seed);
            sum += rff_features(&x, &map).dot(&rff_features(&y, &map));
        }
        let approx = sum / 50.0;
        assert!((approx - exact).abs() < 0.02, "approx {approx} exact {exact}");
    }

    #[test]
    fn singleton_group_equals_plain_features() {
        let map = sample_rff(1.0, 50, 1, 3);
        let emb = aggregate_features_scalar(&[0.77], &[1.0], &map).unwrap();
        let z = rff_features(&[0.77], &map);
        for (a, b) in emb.features.iter().zip(z.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn zero_weights_give_zero_vector() {
        let map = sample_rff(1.0, 10, 1, 3);
        let emb = aggregate_features_scalar(&[1.0, 2.0], &[0.0, 0.0], &map).unwrap();
        assert!(emb.features.iter().all(|v| *v == 0.0));
        assert_eq!(emb.total_weight, 0.0);
    }

    #[test]
    fn empty_group_is_an_error() {
        let map = sample_rff(1.0, 10, 1, 3);
        assert!(matches!(
            aggregate_features_scalar(&[], &[], &map),
            Err(KernelError::EmptyGroup)
        ));
    }

    #[test]
    fn group_inner_product_matches_double_sum() {
        // Exact k_mu by the double sum over the Gaussian kernel.
        let lambda = 1.2;
        let gi = [0.1, 0.9, -0.4];
        let gj = [0.5, -0.2, 1.5];
        let wi = [0.5, 0.3, 0.2];
        let wj = [0.25, 0.25, 0.5];
        let mut exact = 0.0;
        for (a, wa) in gi.iter().zip(&wi) {
            for (b, wb) in gj.iter().zip(&wj) {
                exact += wa * wb * gaussian_kernel(&[*a], &[*b], lambda);
            }
        }
        let map = sample_rff(lambda, 5000, 1, 11);
        let ei = aggregate_features_scalar(&gi, &wi, &map).unwrap();
        let ej = aggregate_features_scalar(&gj, &wj, &map).unwrap();
        let approx = ei.features.dot(&ej.features);
        assert!((approx - exact).abs() < 0.02, "approx {approx} exact {exact}");
    }

    #[test]
    fn aggregation_is_linear_in_weights() {
        let map = sample_rff(0.8, 40, 1, 21);
        let vals = [0.3, 1.4, -2.0];
        let w = [0.2, 0.5, 0.3];
        let scaled: Vec<f64> = w.iter().map(|x| 3.5 * x).collect();
        let a = aggregate_features_scalar(&vals, &w, &map).unwrap();
        let b = aggregate_features_scalar(&vals, &scaled, &map).unwrap();
        for (x, y) in a.features.iter().zip(b.features.iter()) {
            assert_abs_diff_eq!(3.5 * x, *y, epsilon = 1e-12);
        }
    }

    #[test]
    fn approximation_error_shrinks_with_d() {
        // max |z^T z - k| over a fixed 20-point set, median over 5 seeds,
        // decreasing through D in {100, 1000, 10000}.
        let lambda = 1.0;
        let pts: Vec<[f64; 1]> = (0..20).map(|i| [i as f64 * 0.2 - 2.0]).collect();
        let med_err = |d: usize| -> f64 {
            let mut errs: Vec<f64> = (0..5u64)
                .map(|seed| {
                    let map = sample_rff(lambda, d, 1, 1000 + seed);
                    let feats: Vec<Array1<f64>> =
                        pts.iter().map(|p| rff_features(p, &map)).collect();
                    let mut worst = 0.0f64;
                    for i in 0..pts.len() {
                        for j in (i + 1)..pts.len() {
                            let k = gaussian_kernel(&pts[i], &pts[j], lambda);
                            let e = (feats[i].dot(&feats[j]) - k).abs();
                            worst = worst.max(e);
                        }
                    }
                    worst
                })
                .collect();
            errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            errs[2]
        };
        let (e100, e1000, e10000) = (med_err(100), med_err(1000), med_err(10_000));
        assert!(e100 > e1000 && e1000 > e10000, "{e100} {e1000} {e10000}");
    }
}
