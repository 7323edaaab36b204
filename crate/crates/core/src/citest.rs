//! Kernel independence tests over fine-scale or aggregated variables.
//!
//! The unconditional test (RIT) measures the Frobenius norm of the empirical
//! cross-covariance of random Fourier features; the conditional test (RCIT)
//! first residualizes the tested features on the conditioning features by
//! ridge regression. Aggregated variables enter through weighted group
//! embeddings, so relationships are inferred at the fine scale rather than
//! between naive group summaries.

use ndarray::prelude::*;
use thiserror::Error;

use crate::kernels::{self, KernelError};
use crate::linalg::{center_columns, CholFactor};
use crate::seed::{derive_seed, stream_rng};

#[derive(Debug, Error)]
pub enum CitestError {
    #[error("variable `{variable}`: {source}")]
    Kernel {
        variable: String,
        source: KernelError,
    },
    #[error("need at least {needed} observations, got {got}")]
    TooFewObservations { needed: usize, got: usize },
    #[error("observation counts disagree: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("ridge system ill-conditioned for conditioning set (dim {dim}): {detail}")]
    IllConditioned { dim: usize, detail: String },
    #[error("permutation test needs n_perm >= 1")]
    ZeroPermutations,
}

/// When a variable is observed per group of fine-scale samples.
pub type Group = Vec<(f64, f64)>; // (value, weight)

#[derive(Debug, Clone)]
pub enum VariableKind {
    /// One scalar per observation (e.g. an aggregated facility rate).
    Scalar(Vec<f64>),
    /// One weighted group of fine-scale samples per observation.
    Group(Vec<Group>),
}

/// Whether a feature is time-invariant or lagged-dynamic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ScaleTag {
    Static,
    Dynamic(u32),
}

impl std::fmt::Display for ScaleTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScaleTag::Static => write!(f, "static"),
            ScaleTag::Dynamic(lag) => write!(f, "dynamic({lag})"),
        }
    }
}

/// A named variable as seen by one test: scalar-per-observation or
/// group-per-observation.
#[derive(Debug, Clone)]
pub struct VariableView {
    pub name: String,
    pub kind: VariableKind,
    pub scale_tag: ScaleTag,
}

impl VariableView {
    pub fn scalar(name: impl Into<String>, values: Vec<f64>, scale_tag: ScaleTag) -> Self {
        Self {
            name: name.into(),
            kind: VariableKind::Scalar(values),
            scale_tag,
        }
    }

    pub fn group(name: impl Into<String>, groups: Vec<Group>, scale_tag: ScaleTag) -> Self {
        debug_assert!(groups
            .iter()
            .all(|g| g.iter().all(|(_, w)| *w >= 0.0 && w.is_finite())));
        Self {
            name: name.into(),
            kind: VariableKind::Group(groups),
            scale_tag,
        }
    }

    pub fn n_observations(&self) -> usize {
        match &self.kind {
            VariableKind::Scalar(v) => v.len(),
            VariableKind::Group(g) => g.len(),
        }
    }

    fn flattened_values(&self) -> Vec<f64> {
        match &self.kind {
            VariableKind::Scalar(v) => v.clone(),
            VariableKind::Group(groups) => groups
                .iter()
                .flat_map(|g| g.iter().map(|(v, _)| *v))
                .collect(),
        }
    }
}

/// How p-values are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PValueMethod {
    /// Moment-matched Gamma approximation to the weighted-chi-square null.
    Gamma,
    /// Permutation oracle (exchangeable rows under H0).
    Permutation,
}

#[derive(Debug, Clone)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub method: PValueMethod,
    pub n: usize,
    /// Set when the Gamma moments were degenerate and the permutation
    /// fallback produced the p-value.
    pub gamma_fallback: bool,
}

#[derive(Debug, Clone)]
pub struct CiTestConfig {
    /// Feature count per variable in the unconditional test.
    pub d_marginal: usize,
    /// Feature count for the tested variables in the conditional test.
    pub d_xy: usize,
    /// Feature count per conditioning variable.
    pub d_z: usize,
    /// Ridge penalty, applied as `ridge * n` on the feature Gram.
    pub ridge: f64,
    pub pvalue: PValueMethod,
    pub n_perm: usize,
    pub seed: u64,
}

impl Default for CiTestConfig {
    fn default() -> Self {
        Self {
            d_marginal: 100,
            d_xy: 5,
            d_z: 100,
            ridge: 1e-3,
            pvalue: PValueMethod::Gamma,
            n_perm: 500,
            seed: 0,
        }
    }
}

/// Centered feature matrix for one variable: row `i` is `z(x_i)` for scalar
/// variables or the group embedding `z_mu(group_i)` for aggregated ones.
/// The bandwidth comes from the median heuristic on the flattened values and
/// the map seed from the variable's name, so the same variable always maps to
/// the same features under one master seed.
pub fn featurize(var: &VariableView, d: usize, seed: u64) -> Result<Array2<f64>, CitestError> {
    let flat = var.flattened_values();
    let bandwidth =
        kernels::median_heuristic_scalar(&flat).map_err(|source| CitestError::Kernel {
            variable: var.name.clone(),
            source,
        })?;
    let map_seed = derive_seed(seed, "featurize", fnv_name(&var.name));
    let map = kernels::sample_rff(bandwidth, d, 1, map_seed);

    let n = var.n_observations();
    let mut features = Array2::zeros((n, map.feature_dim()));
    match &var.kind {
        VariableKind::Scalar(values) => {
            for (i, &v) in values.iter().enumerate() {
                features
                    .row_mut(i)
                    .assign(&kernels::rff_features(&[v], &map));
            }
        }
        VariableKind::Group(groups) => {
            for (i, group) in groups.iter().enumerate() {
                let values: Vec<f64> = group.iter().map(|(v, _)| *v).collect();
                let weights: Vec<f64> = group.iter().map(|(_, w)| *w).collect();
                let emb = kernels::aggregate_features_scalar(&values, &weights, &map).map_err(
                    |source| CitestError::Kernel {
                        variable: var.name.clone(),
                        source,
                    },
                )?;
                features.row_mut(i).assign(&emb.features);
            }
        }
    }
    center_columns(&mut features);
    Ok(features)
}

fn fnv_name(name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// `n * || (1/n) A^T B ||_F^2` for centered feature matrices.
pub(crate) fn cross_covariance_statistic(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let n = a.nrows() as f64;
    let cross = a.t().dot(b);
    cross.iter().map(|v| v * v).sum::<f64>() / n
}

/// Upper tail of the moment-matched Gamma null at `statistic`, from the
/// residual feature matrices. `None` when the moment estimates are not
/// positive (degenerate features).
pub fn gamma_pvalue(ex: &Array2<f64>, ey: &Array2<f64>, statistic: f64) -> Option<f64> {
    let n = ex.nrows() as f64;
    let cov_x = ex.t().dot(ex) / n;
    let cov_y = ey.t().dot(ey) / n;
    // Null: sum_{ij} lam_i mu_j z_ij^2 with lam, mu the eigen-spectra.
    let mean = cov_x.diag().sum() * cov_y.diag().sum();
    let var = 2.0
        * cov_x.iter().map(|v| v * v).sum::<f64>()
        * cov_y.iter().map(|v| v * v).sum::<f64>();
    if !(mean > 0.0) || !(var > 0.0) {
        return None;
    }
    let theta = var / mean;
    let shape = mean * mean / var;
    if statistic <= 0.0 {
        return Some(1.0);
    }
    // regularized upper incomplete gamma Q(shape, x / theta)
    Some(statrs::function::gamma::gamma_ur(shape, statistic / theta))
}

/// `p = (1 + #{perm stats >= observed}) / (1 + n_perm)`. The statistic
/// closure receives a row permutation of `0..n`.
pub fn permutation_pvalue<F: FnMut(&[usize]) -> f64>(
    observed: f64,
    n: usize,
    n_perm: usize,
    seed: u64,
    mut stat_fn: F,
) -> Result<f64, CitestError> {
    if n_perm == 0 {
        return Err(CitestError::ZeroPermutations);
    }
    let mut rng = stream_rng(seed, "permutation", 0);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut exceed = 0usize;
    for _ in 0..n_perm {
        // Fisher-Yates
        for i in (1..n).rev() {
            let j = rand::Rng::random_range(&mut rng, 0..=i);
            idx.swap(i, j);
        }
        if stat_fn(&idx) >= observed {
            exceed += 1;
        }
    }
    Ok((1 + exceed) as f64 / (1 + n_perm) as f64)
}

fn permuted_rows(m: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros(m.dim());
    for (to, &from) in idx.iter().enumerate() {
        out.row_mut(to).assign(&m.row(from));
    }
    out
}

fn check_lengths(a: usize, b: usize) -> Result<(), CitestError> {
    if a != b {
        return Err(CitestError::LengthMismatch(a, b));
    }
    Ok(())
}

/// Finish a test on residual feature matrices: compute the statistic's
/// p-value by the configured method, with permutation fallback when the
/// Gamma moments degenerate. `perm_seed` is the test's own stream.
pub(crate) fn test_from_features(
    ex: &Array2<f64>,
    ey: &Array2<f64>,
    cfg: &CiTestConfig,
    perm_seed: u64,
) -> Result<TestResult, CitestError> {
    let statistic = cross_covariance_statistic(ex, ey);
    finish(ex, ey, statistic, cfg, perm_seed)
}

fn finish(
    ex: &Array2<f64>,
    ey: &Array2<f64>,
    statistic: f64,
    cfg: &CiTestConfig,
    perm_seed: u64,
) -> Result<TestResult, CitestError> {
    let n = ex.nrows();
    let perm = |seed_tag: u64| {
        permutation_pvalue(statistic, n, cfg.n_perm, derive_seed(perm_seed, "perm", seed_tag), |idx| {
            cross_covariance_statistic(ex, &permuted_rows(ey, idx))
        })
    };
    match cfg.pvalue {
        PValueMethod::Gamma => match gamma_pvalue(ex, ey, statistic) {
            Some(p) => Ok(TestResult {
                statistic,
                p_value: p,
                method: PValueMethod::Gamma,
                n,
                gamma_fallback: false,
            }),
            None => Ok(TestResult {
                statistic,
                p_value: perm(1)?,
                method: PValueMethod::Permutation,
                n,
                gamma_fallback: true,
            }),
        },
        PValueMethod::Permutation => Ok(TestResult {
            statistic,
            p_value: perm(0)?,
            method: PValueMethod::Permutation,
            n,
            gamma_fallback: false,
        }),
    }
}

/// Unconditional independence test between `x` and `y`.
pub fn rit(
    x: &VariableView,
    y: &VariableView,
    cfg: &CiTestConfig,
) -> Result<TestResult, CitestError> {
    check_lengths(x.n_observations(), y.n_observations())?;
    let n = x.n_observations();
    if n < 20 {
        return Err(CitestError::TooFewObservations { needed: 20, got: n });
    }
    let fx = featurize(x, cfg.d_marginal, cfg.seed)?;
    let fy = featurize(y, cfg.d_marginal, cfg.seed)?;
    test_from_features(&fx, &fy, cfg, cfg.seed)
}

/// Conditional independence test of `x` and `y` given `z`.
///
/// Features of `xdot = (x, z)` and of `y` are residualized on the features of
/// `z` by closed-form ridge regression; the statistic is the norm of the
/// empirical cross-covariance of the residuals. An empty conditioning set
/// dispatches to [`rit`].
pub fn rcit(
    x: &VariableView,
    y: &VariableView,
    z: &[&VariableView],
    cfg: &CiTestConfig,
) -> Result<TestResult, CitestError> {
    if z.is_empty() {
        return rit(x, y, cfg);
    }
    check_lengths(x.n_observations(), y.n_observations())?;
    let n = x.n_observations();
    if n < 50 {
        return Err(CitestError::TooFewObservations { needed: 50, got: n });
    }
    for zi in z {
        check_lengths(n, zi.n_observations())?;
    }

    let fx = featurize(x, cfg.d_xy, cfg.seed)?;
    let fy = featurize(y, cfg.d_xy, cfg.seed)?;
    let fz_parts: Vec<Array2<f64>> = z
        .iter()
        .map(|zi| featurize(zi, cfg.d_z, cfg.seed))
        .collect::<Result<_, _>>()?;
    let fz = hconcat(&fz_parts);
    let fxdot = hconcat(&[fx, fz.clone()]);

    let (ex, ey) = residualize_pair(&fxdot, &fy, &fz, cfg.ridge)?;
    test_from_features(&ex, &ey, cfg, cfg.seed)
}

/// Residualize `a` and `b` on `z` by ridge regression.
pub(crate) fn residualize_pair(
    a: &Array2<f64>,
    b: &Array2<f64>,
    z: &Array2<f64>,
    ridge: f64,
) -> Result<(Array2<f64>, Array2<f64>), CitestError> {
    let n = z.nrows() as f64;
    let dim = z.ncols();
    let mut gram = z.t().dot(z);
    for i in 0..dim {
        gram[(i, i)] += ridge * n;
    }
    let chol = CholFactor::new(&gram).map_err(|e| CitestError::IllConditioned {
        dim,
        detail: e.to_string(),
    })?;
    let ea = a - &z.dot(&chol.solve_mat(&z.t().dot(a)));
    let eb = b - &z.dot(&chol.solve_mat(&z.t().dot(b)));
    Ok((ea, eb))
}

fn hconcat(parts: &[Array2<f64>]) -> Array2<f64> {
    let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(1), &views).expect("matching row counts")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normals(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = stream_rng(seed, "citest-test", 0);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    fn cfg(seed: u64) -> CiTestConfig {
        CiTestConfig {
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn featurize_scalar_rows_unit_norm_before_centering() {
        // verified indirectly: centering makes column means 0, and the
        // uncentered rows are unit norm by construction of rff_features;
        // here we re-add the means and check.
        let var = VariableView::scalar("v", normals(60, 1), ScaleTag::Static);
        let f = featurize(&var, 16, 9).unwrap();
        let means = f.sum_axis(Axis(0)) / 60.0;
        for m in means.iter() {
            assert_abs_diff_eq!(*m, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn featurize_group_singletons_match_scalar() {
        let values = normals(80, 2);
        let scalar = VariableView::scalar("same-name", values.clone(), ScaleTag::Static);
        let grouped = VariableView::group(
            "same-name",
            values.iter().map(|&v| vec![(v, 1.0)]).collect(),
            ScaleTag::Static,
        );
        let fs = featurize(&scalar, 20, 5).unwrap();
        let fg = featurize(&grouped, 20, 5).unwrap();
        for (a, b) in fs.iter().zip(fg.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn featurize_rejects_constant_variable() {
        let var = VariableView::scalar("c", vec![1.0; 30], ScaleTag::Static);
        assert!(matches!(
            featurize(&var, 8, 0),
            Err(CitestError::Kernel { .. })
        ));
    }

    #[test]
    fn rit_detects_strong_linear_dependence() {
        let n = 500;
        let x = normals(n, 3);
        let noise = normals(n, 4);
        let y: Vec<f64> = x.iter().zip(&noise).map(|(a, b)| a + 0.1 * b).collect();
        let res = rit(
            &VariableView::scalar("x", x, ScaleTag::Static),
            &VariableView::scalar("y", y, ScaleTag::Static),
            &cfg(7),
        )
        .unwrap();
        assert!(res.p_value < 0.001, "p = {}", res.p_value);
    }

    #[test]
    fn rit_detects_quadratic_dependence() {
        // linear correlation is ~0 here; the kernel test still fires
        let n = 500;
        let x = normals(n, 5);
        let noise = normals(n, 6);
        let y: Vec<f64> = x
            .iter()
            .zip(&noise)
            .map(|(a, b)| a * a + 0.3 * b)
            .collect();
        let res = rit(
            &VariableView::scalar("x", x, ScaleTag::Static),
            &VariableView::scalar("y", y, ScaleTag::Static),
            &cfg(8),
        )
        .unwrap();
        assert!(res.p_value < 0.01, "p = {}", res.p_value);
    }

    #[test]
    fn rit_calibrated_under_h0_small() {
        // 60 trials at alpha = 0.05; the acceptance suite runs the full 200.
        let mut rejections = 0;
        for trial in 0..60u64 {
            let x = normals(300, 1000 + 2 * trial);
            let y = normals(300, 1001 + 2 * trial);
            let res = rit(
                &VariableView::scalar("x", x, ScaleTag::Static),
                &VariableView::scalar("y", y, ScaleTag::Static),
                &cfg(trial),
            )
            .unwrap();
            if res.p_value < 0.05 {
                rejections += 1;
            }
        }
        let rate = rejections as f64 / 60.0;
        assert!(rate <= 0.15, "H0 rejection rate {rate}");
    }

    #[test]
    fn rit_requires_20_observations() {
        let x = VariableView::scalar("x", normals(10, 0), ScaleTag::Static);
        let y = VariableView::scalar("y", normals(10, 1), ScaleTag::Static);
        assert!(matches!(
            rit(&x, &y, &cfg(0)),
            Err(CitestError::TooFewObservations { .. })
        ));
    }

    #[test]
    fn rcit_blocks_chain_dependence() {
        // X -> Z -> Y: conditioning on Z removes the dependence
        let n = 600;
        let x = normals(n, 11);
        let ez = normals(n, 12);
        let ey = normals(n, 13);
        let z: Vec<f64> = x.iter().zip(&ez).map(|(a, b)| a + 0.5 * b).collect();
        let y: Vec<f64> = z.iter().zip(&ey).map(|(a, b)| a + 0.5 * b).collect();
        let xv = VariableView::scalar("x", x, ScaleTag::Static);
        let yv = VariableView::scalar("y", y, ScaleTag::Static);
        let zv = VariableView::scalar("z", z, ScaleTag::Static);

        let marginal = rit(&xv, &yv, &cfg(20)).unwrap();
        assert!(marginal.p_value < 0.01, "marginal p {}", marginal.p_value);

        let conditional = rcit(&xv, &yv, &[&zv], &cfg(20)).unwrap();
        assert!(
            conditional.p_value > 0.05,
            "conditional p {}",
            conditional.p_value
        );
    }

    #[test]
    fn rcit_exposes_collider_dependence() {
        // X -> C <- Z: conditioning on the collider induces dependence
        let n = 600;
        let x = normals(n, 31);
        let z = normals(n, 32);
        let noise = normals(n, 33);
        let c: Vec<f64> = x
            .iter()
            .zip(&z)
            .zip(&noise)
            .map(|((a, b), e)| a + b + 0.2 * e)
            .collect();
        let xv = VariableView::scalar("x", x, ScaleTag::Static);
        let zv = VariableView::scalar("z", z, ScaleTag::Static);
        let cv = VariableView::scalar("c", c, ScaleTag::Static);

        let marginal = rit(&xv, &zv, &cfg(21)).unwrap();
        assert!(marginal.p_value > 0.05, "marginal p {}", marginal.p_value);

        let conditional = rcit(&xv, &zv, &[&cv], &cfg(21)).unwrap();
        assert!(
            conditional.p_value < 0.01,
            "collider p {}",
            conditional.p_value
        );
    }

    #[test]
    fn rcit_keeps_dependence_with_irrelevant_conditioning() {
        let n = 600;
        let x = normals(n, 41);
        let z = normals(n, 42);
        let noise = normals(n, 43);
        let y: Vec<f64> = x
            .iter()
            .zip(&noise)
            .map(|(a, e)| (2.0 * a).sin() + 0.1 * e)
            .collect();
        let res = rcit(
            &VariableView::scalar("x", x, ScaleTag::Static),
            &VariableView::scalar("y", y, ScaleTag::Static),
            &[&VariableView::scalar("z", z, ScaleTag::Static)],
            &cfg(22),
        )
        .unwrap();
        assert!(res.p_value < 0.001, "p = {}", res.p_value);
    }

    #[test]
    fn rcit_empty_conditioning_dispatches_to_rit() {
        let x = VariableView::scalar("x", normals(100, 51), ScaleTag::Static);
        let y = VariableView::scalar("y", normals(100, 52), ScaleTag::Static);
        let a = rcit(&x, &y, &[], &cfg(5)).unwrap();
        let b = rit(&x, &y, &cfg(5)).unwrap();
        assert_eq!(a.statistic, b.statistic);
        assert_eq!(a.p_value, b.p_value);
    }

    #[test]
    fn results_are_deterministic() {
        let x = VariableView::scalar("x", normals(200, 61), ScaleTag::Static);
        let y = VariableView::scalar("y", normals(200, 62), ScaleTag::Static);
        let z = VariableView::scalar("z", normals(200, 63), ScaleTag::Static);
        let a = rcit(&x, &y, &[&z], &cfg(9)).unwrap();
        let b = rcit(&x, &y, &[&z], &cfg(9)).unwrap();
        assert_eq!(a.statistic, b.statistic);
        assert_eq!(a.p_value, b.p_value);
    }

    #[test]
    fn statistic_is_symmetric_in_x_and_y() {
        let x = VariableView::scalar("x", normals(150, 71), ScaleTag::Static);
        let y = VariableView::scalar("y", normals(150, 72), ScaleTag::Static);
        let a = rit(&x, &y, &cfg(3)).unwrap();
        let b = rit(&y, &x, &cfg(3)).unwrap();
        assert_abs_diff_eq!(a.statistic, b.statistic, epsilon = 1e-12);
    }

    #[test]
    fn statistic_invariant_under_joint_reordering() {
        let n = 120;
        let xv = normals(n, 81);
        let yv = normals(n, 82);
        let mut rng = stream_rng(0, "reorder", 0);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        let xp: Vec<f64> = perm.iter().map(|&i| xv[i]).collect();
        let yp: Vec<f64> = perm.iter().map(|&i| yv[i]).collect();
        let a = rit(
            &VariableView::scalar("x", xv, ScaleTag::Static),
            &VariableView::scalar("y", yv, ScaleTag::Static),
            &cfg(4),
        )
        .unwrap();
        let b = rit(
            &VariableView::scalar("x", xp, ScaleTag::Static),
            &VariableView::scalar("y", yp, ScaleTag::Static),
            &cfg(4),
        )
        .unwrap();
        assert_abs_diff_eq!(a.statistic, b.statistic, epsilon = 1e-10);
    }

    #[test]
    fn group_singletons_reduce_to_scalar_statistic() {
        let n = 100;
        let xv = normals(n, 91);
        let yv = normals(n, 92);
        let scalar = rit(
            &VariableView::scalar("x", xv.clone(), ScaleTag::Static),
            &VariableView::scalar("y", yv.clone(), ScaleTag::Static),
            &cfg(6),
        )
        .unwrap();
        let grouped = rit(
            &VariableView::group(
                "x",
                xv.iter().map(|&v| vec![(v, 1.0)]).collect(),
                ScaleTag::Static,
            ),
            &VariableView::scalar("y", yv, ScaleTag::Static),
            &cfg(6),
        )
        .unwrap();
        assert!(
            (scalar.statistic - grouped.statistic).abs() < 1e-10,
            "{} vs {}",
            scalar.statistic,
            grouped.statistic
        );
    }

    #[test]
    fn permutation_pvalue_extremes() {
        // observed larger than every permuted statistic -> 1/(n_perm+1)
        let p = permutation_pvalue(10.0, 5, 99, 0, |_| 0.0).unwrap();
        assert_abs_diff_eq!(p, 1.0 / 100.0);
        // n_perm = 0 is a precondition violation
        assert!(matches!(
            permutation_pvalue(1.0, 5, 0, 0, |_| 0.0),
            Err(CitestError::ZeroPermutations)
        ));
    }

    #[test]
    fn permutation_pvalues_uniform_under_h0() {
        // statistic computed on already-permuted data: p approximately
        // uniform across trials (KS distance check)
        let mut pvals = Vec::new();
        for trial in 0..80u64 {
            let x = normals(100, 2000 + 2 * trial);
            let y = normals(100, 2001 + 2 * trial);
            let c = CiTestConfig {
                d_marginal: 10,
                n_perm: 200,
                pvalue: PValueMethod::Permutation,
                seed: trial,
                ..Default::default()
            };
            let res = rit(
                &VariableView::scalar("x", x, ScaleTag::Static),
                &VariableView::scalar("y", y, ScaleTag::Static),
                &c,
            )
            .unwrap();
            pvals.push(res.p_value);
        }
        pvals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = pvals.len() as f64;
        let ks = pvals
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let lo = (p - i as f64 / n).abs();
                let hi = (p - (i as f64 + 1.0) / n).abs();
                lo.max(hi)
            })
            .fold(0.0f64, f64::max);
        // KS critical value at alpha 0.01 for n = 80 is ~0.182
        assert!(ks < 0.182, "KS distance {ks}");
    }

    #[test]
    fn gamma_tail_monotone_and_tiny_for_large_statistic() {
        let x = normals(200, 301);
        let fx = featurize(
            &VariableView::scalar("x", x, ScaleTag::Static),
            10,
            0,
        )
        .unwrap();
        let y = normals(200, 302);
        let fy = featurize(
            &VariableView::scalar("y", y, ScaleTag::Static),
            10,
            0,
        )
        .unwrap();
        let p_large = gamma_pvalue(&fx, &fy, 1e6).unwrap();
        assert!(p_large < 1e-12);
        let p_small = gamma_pvalue(&fx, &fy, 1e-9).unwrap();
        assert!(p_small > 0.99);
    }

    #[test]
    fn gamma_pvalue_near_half_at_null_mean() {
        let x = normals(300, 311);
        let y = normals(300, 312);
        let fx = featurize(&VariableView::scalar("x", x, ScaleTag::Static), 50, 0).unwrap();
        let fy = featurize(&VariableView::scalar("y", y, ScaleTag::Static), 50, 0).unwrap();
        let n = fx.nrows() as f64;
        let mean = (fx.t().dot(&fx) / n).diag().sum() * (fy.t().dot(&fy) / n).diag().sum();
        let p = gamma_pvalue(&fx, &fy, mean).unwrap();
        assert!((p - 0.5).abs() < 0.15, "p at null mean {p}");
    }

    #[test]
    fn monotone_evidence_in_signal_amplitude() {
        let n = 400;
        let x = normals(n, 321);
        let noise = normals(n, 322);
        let mut last_p = f64::INFINITY;
        for amp in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let y: Vec<f64> = x.iter().zip(&noise).map(|(a, e)| amp * a + e).collect();
            let res = rit(
                &VariableView::scalar("x", x.clone(), ScaleTag::Static),
                &VariableView::scalar("y", y, ScaleTag::Static),
                &cfg(12),
            )
            .unwrap();
            assert!(
                res.p_value <= last_p + 1e-12,
                "p increased: {} -> {} at amp {amp}",
                last_p,
                res.p_value
            );
            last_p = res.p_value;
        }
    }
}
