//! Spatiotemporal prewhitening: remove large-scale trends from covariate
//! fields and from aggregated incidence so the independence tests see
//! approximately i.i.d. residuals.
//!
//! Covariates are fit directly with a separable Matern-3/2 (space) x AR(1)
//! (time) Gaussian process plus noise, maximizing the marginal likelihood
//! under tight log-normal priors on the range and scale (strong
//! regularization keeps this step from absorbing fine-scale signal).
//! Incidence goes through the no-covariate disaggregation model instead;
//! see [`prewhiten_incidence`].

mod gp;

use ndarray::prelude::*;
use thiserror::Error;

use crate::disagg::{self, DisaggConfig, DisaggError};
use crate::grid::CatchmentWeights;
use crate::linalg::LinalgError;
use crate::opt::{golden_section, nelder_mead};
use gp::{ar1_eigen, KronGp, SpatialBasis};

#[derive(Debug, Error)]
pub enum PrewhitenError {
    #[error("need at least {needed} {what}, got {got}")]
    TooSmall {
        what: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("linear algebra: {0}")]
    Linalg(#[from] LinalgError),
    #[error("incidence model: {0}")]
    Disagg(#[from] DisaggError),
}

/// Hyperparameters of the separable trend process.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct StKernelParams {
    /// Spatial range (distance at which correlation drops to ~0.1).
    pub rho_s: f64,
    /// Spatial marginal standard deviation.
    pub sigma_s: f64,
    /// AR(1) coefficient over months; 0 for static fields.
    pub phi: f64,
    /// Independent noise standard deviation.
    pub sigma_n: f64,
}

#[derive(Debug, Clone)]
pub struct PrewhitenConfig {
    /// Log-normal prior on the range: mean exp(2), sd 0.1 on the log scale.
    pub log_rho_prior: (f64, f64),
    /// Log-normal prior on the scale: mean exp(-2), sd 0.1 on the log scale.
    pub log_sigma_prior: (f64, f64),
    /// Range search bounds (length units).
    pub rho_bounds: (f64, f64),
    /// Above this many locations the spatial factor switches to a low-rank
    /// RFF basis.
    pub dense_limit: usize,
    /// Rank of the low-rank spatial basis (frequency count).
    pub rff_dim: usize,
    pub seed: u64,
}

impl Default for PrewhitenConfig {
    fn default() -> Self {
        Self {
            log_rho_prior: (2.0, 0.1),
            log_sigma_prior: (-2.0, 0.1),
            rho_bounds: (1.0, 60.0),
            dense_limit: 2000,
            rff_dim: 500,
            seed: 0,
        }
    }
}

/// Residuals plus the fitted trend parameters.
#[derive(Debug, Clone)]
pub struct PrewhitenFit {
    /// Same shape as the input: `n_locations x n_times`.
    pub residuals: Array2<f64>,
    pub params: StKernelParams,
    pub mean: f64,
    pub converged: bool,
}

fn spatial_basis(
    coords: &[[f64; 2]],
    rho: f64,
    cfg: &PrewhitenConfig,
) -> Result<SpatialBasis, LinalgError> {
    if coords.len() <= cfg.dense_limit {
        SpatialBasis::dense(coords, rho)
    } else {
        SpatialBasis::low_rank(coords, rho, cfg.rff_dim, cfg.seed)
    }
}

/// MAP objective for `(sigma_s, sigma_n)` at fixed transforms, optimized by
/// Nelder-Mead in log space. Returns `(log sigma_s, log sigma_n, value)`.
fn optimize_scales(gp: &KronGp, cfg: &PrewhitenConfig, start: (f64, f64)) -> (f64, f64, f64) {
    let (prior_mu, prior_sd) = cfg.log_sigma_prior;
    let objective = |p: &[f64]| -> f64 {
        let (ls, ln) = (p[0], p[1]);
        if !(-12.0..=6.0).contains(&ls) || !(-12.0..=6.0).contains(&ln) {
            return f64::INFINITY;
        }
        let sigma_s2 = (2.0 * ls).exp();
        let sigma_n2 = (2.0 * ln).exp();
        let prior = (ls - prior_mu) * (ls - prior_mu) / (2.0 * prior_sd * prior_sd);
        gp.nlml(sigma_s2, sigma_n2) + prior
    };
    let (x, v) = nelder_mead(objective, &[start.0, start.1], 0.5, 200);
    (x[0], x[1], v)
}

fn fit(
    values: &Array2<f64>,
    coords: &[[f64; 2]],
    temporal: bool,
    cfg: &PrewhitenConfig,
) -> Result<PrewhitenFit, PrewhitenError> {
    let (n_loc, n_t) = values.dim();
    if n_loc < 2 {
        return Err(PrewhitenError::TooSmall {
            what: "locations",
            needed: 2,
            got: n_loc,
        });
    }
    if temporal && n_t < 2 {
        return Err(PrewhitenError::TooSmall {
            what: "time points",
            needed: 2,
            got: n_t,
        });
    }
    assert_eq!(coords.len(), n_loc);

    // pre-center: kills the large-constant cancellation and makes the
    // residuals invariant to a constant shift of the field
    let mean0 = values.sum() / values.len() as f64;
    let values = values.mapv(|v| v - mean0);
    let values = &values;
    let var = values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64;
    if var < 1e-18 {
        return Ok(PrewhitenFit {
            residuals: values.clone(),
            params: StKernelParams {
                rho_s: cfg.log_rho_prior.0.exp(),
                sigma_s: cfg.log_sigma_prior.0.exp(),
                phi: 0.0,
                sigma_n: 1e-9,
            },
            mean: mean0,
            converged: true,
        });
    }

    let (rho_prior_mu, rho_prior_sd) = cfg.log_rho_prior;
    // scale starts: split the observed variance between trend and noise
    let start = (0.5 * (0.5 * var).ln(), 0.5 * (0.5 * var).ln());

    // profile over rho (golden section), with phi and the scales optimized
    // at each candidate
    let mut best: Option<(f64, f64, f64, f64, f64)> = None; // (nlp, rho, phi, ls, ln)
    let mut profile_rho = |log_rho: f64| -> f64 {
        let rho = log_rho.exp();
        let basis = match spatial_basis(coords, rho, cfg) {
            Ok(b) => b,
            Err(_) => return f64::INFINITY,
        };
        let rho_prior =
            (log_rho - rho_prior_mu) * (log_rho - rho_prior_mu) / (2.0 * rho_prior_sd * rho_prior_sd);

        let eval_phi = |phi: f64| -> (f64, f64, f64) {
            let (lt, qt) = match ar1_eigen(n_t, phi) {
                Ok(x) => x,
                Err(_) => return (f64::INFINITY, 0.0, 0.0),
            };
            let gp = KronGp::new(&basis, &lt, &qt, values);
            let (ls, ln, v) = optimize_scales(&gp, cfg, start);
            (v, ls, ln)
        };

        let (phi, value, ls, ln) = if temporal {
            let mut cache: Option<(f64, f64, f64, f64)> = None;
            let (phi, _) = golden_section(
                |phi| {
                    let (v, ls, ln) = eval_phi(phi);
                    if cache.map(|c| v < c.1).unwrap_or(true) {
                        cache = Some((phi, v, ls, ln));
                    }
                    v
                },
                -0.95,
                0.95,
                14,
            );
            let (phi_best, v, ls, ln) = cache.unwrap_or((phi, f64::INFINITY, start.0, start.1));
            (phi_best, v, ls, ln)
        } else {
            let (v, ls, ln) = eval_phi(0.0);
            (0.0, v, ls, ln)
        };

        let total = value + rho_prior;
        if best.map(|b| total < b.0).unwrap_or(true) {
            best = Some((total, rho, phi, ls, ln));
        }
        total
    };

    let (lo, hi) = (cfg.rho_bounds.0.ln(), cfg.rho_bounds.1.ln());
    golden_section(&mut profile_rho, lo, hi, 12);
    let (nlp, rho, phi, ls, ln) = best.expect("at least one rho evaluated");
    let converged = nlp.is_finite();

    // final residuals at the chosen hyperparameters
    let basis = spatial_basis(coords, rho, cfg)?;
    let (lt, qt) = ar1_eigen(n_t, phi)?;
    let gp = KronGp::new(&basis, &lt, &qt, values);
    let sigma_s2 = (2.0 * ls).exp();
    let sigma_n2 = (2.0 * ln).exp();
    let (mu, m) = gp.residual_parts(sigma_s2, sigma_n2);
    let residuals = values.mapv(|v| v - mu) + basis.vectors.dot(&m).dot(&qt.t());

    Ok(PrewhitenFit {
        residuals,
        params: StKernelParams {
            rho_s: rho,
            sigma_s: sigma_s2.sqrt(),
            phi,
            sigma_n: sigma_n2.sqrt(),
        },
        mean: mean0 + mu,
        converged,
    })
}

/// Prewhiten a dynamic covariate field observed at `n_locations x n_times`.
pub fn prewhiten_covariate(
    values: &Array2<f64>,
    coords: &[[f64; 2]],
    cfg: &PrewhitenConfig,
) -> Result<PrewhitenFit, PrewhitenError> {
    fit(values, coords, true, cfg)
}

/// Prewhiten a static covariate field (spatial trend only).
pub fn prewhiten_static(
    values: &Array1<f64>,
    coords: &[[f64; 2]],
    cfg: &PrewhitenConfig,
) -> Result<PrewhitenFit, PrewhitenError> {
    let column = values
        .view()
        .into_shape_with_order((values.len(), 1))
        .unwrap()
        .to_owned();
    fit(&column, coords, false, cfg)
}

/// Incidence residuals from the no-covariate disaggregation model
/// `log lambda_it = GP(s_i, t)`, with facility attractiveness learned as
/// part of the fit. Residuals are observed minus fitted facility rates per
/// treatment-seeking population; facilities with zero catchment population
/// are excluded (residual row of NaN) and counted.
pub struct IncidencePrewhiten {
    /// `n_facilities x n_months`; NaN rows mark excluded facilities.
    pub residuals: Array2<f64>,
    /// Fitted attractiveness, one entry per facility.
    pub attractiveness: Vec<f64>,
    /// Catchment weights under the fitted attractiveness.
    pub catchment: CatchmentWeights,
    pub excluded_facilities: Vec<usize>,
    pub converged: bool,
}

pub fn prewhiten_incidence(
    counts: &Array2<u64>,
    travel_time: &Array2<f64>,
    pixel_coords: &[[f64; 2]],
    pop_tsp: &[f64],
    cfg: &DisaggConfig,
) -> Result<IncidencePrewhiten, PrewhitenError> {
    let fit = disagg::fit_no_covariate_model(counts, travel_time, pixel_coords, pop_tsp, cfg)?;

    let catchment = fit.catchment;
    let n_fac = counts.nrows();
    let months = counts.ncols();
    // treatment-seeking population attending each facility
    let mut treat_pop = vec![0.0; n_fac];
    for (i, row) in catchment.p.rows().into_iter().enumerate() {
        for (j, &pij) in row.iter().enumerate() {
            treat_pop[j] += pij * pop_tsp[i];
        }
    }

    let mut residuals = Array2::zeros((n_fac, months));
    let mut excluded = Vec::new();
    for j in 0..n_fac {
        if treat_pop[j] <= 0.0 {
            excluded.push(j);
            for t in 0..months {
                residuals[(j, t)] = f64::NAN;
            }
            continue;
        }
        for t in 0..months {
            let observed = counts[(j, t)] as f64 / treat_pop[j];
            let fitted = fit.expected[(j, t)] / treat_pop[j];
            residuals[(j, t)] = observed - fitted;
        }
    }

    Ok(IncidencePrewhiten {
        residuals,
        attractiveness: fit.attractiveness,
        catchment,
        excluded_facilities: excluded,
        converged: fit.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::pearson;
    use crate::seed::stream_rng;
    use rand_distr::{Distribution, StandardNormal};

    fn grid_coords(nr: usize, nc: usize) -> Vec<[f64; 2]> {
        let mut out = Vec::new();
        for r in 0..nr {
            for c in 0..nc {
                out.push([c as f64, r as f64]);
            }
        }
        out
    }

    /// Sample a smooth field from the trend model itself.
    fn smooth_sample(
        coords: &[[f64; 2]],
        n_t: usize,
        rho: f64,
        phi: f64,
        sigma_s: f64,
        seed: u64,
    ) -> Array2<f64> {
        let basis = SpatialBasis::dense(coords, rho).unwrap();
        let (lt, qt) = ar1_eigen(n_t, phi).unwrap();
        let mut rng = stream_rng(seed, "smooth-sample", 0);
        let mut z = Array2::zeros((coords.len(), n_t));
        for i in 0..basis.rank() {
            for j in 0..n_t {
                let e: f64 = StandardNormal.sample(&mut rng);
                z[(i, j)] = e * (basis.lambdas[i] * lt[j]).sqrt() * sigma_s;
            }
        }
        basis.vectors.dot(&z).dot(&qt.t())
    }

    #[test]
    fn constant_field_gives_zero_residuals() {
        let coords = grid_coords(6, 6);
        let values = Array2::from_elem((36, 4), 3.25);
        let fit = prewhiten_covariate(&values, &coords, &PrewhitenConfig::default()).unwrap();
        for r in fit.residuals.iter() {
            assert!(r.abs() < 1e-6);
        }
    }

    #[test]
    fn smooth_field_shrinks_to_small_residuals() {
        // simulate from the model with tiny noise: the fit should absorb it
        let coords = grid_coords(10, 10);
        let mut values = smooth_sample(&coords, 6, 7.0, 0.6, 0.5, 3);
        let mut rng = stream_rng(4, "tiny-noise", 0);
        for v in values.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += 0.005 * e + 1.0;
        }
        let field_sd = sd(&values);
        let fit = prewhiten_covariate(&values, &coords, &PrewhitenConfig::default()).unwrap();
        let resid_sd = sd(&fit.residuals);
        assert!(
            resid_sd <= 0.1 * field_sd,
            "residual sd {resid_sd} vs field sd {field_sd}"
        );
    }

    #[test]
    fn white_noise_field_passes_through() {
        let coords = grid_coords(10, 10);
        let mut rng = stream_rng(5, "white", 0);
        let values = Array2::from_shape_fn((100, 6), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z
        });
        let fit = prewhiten_covariate(&values, &coords, &PrewhitenConfig::default()).unwrap();
        let a: Vec<f64> = values.iter().copied().collect();
        let b: Vec<f64> = fit.residuals.iter().copied().collect();
        let r = pearson(&a, &b).unwrap();
        assert!(r >= 0.9, "residual/input correlation {r}");
    }

    #[test]
    fn static_constant_field_is_flattened() {
        let coords = grid_coords(5, 5);
        let values = Array1::from_elem(25, -2.0);
        let fit = prewhiten_static(&values, &coords, &PrewhitenConfig::default()).unwrap();
        for r in fit.residuals.iter() {
            assert!(r.abs() < 1e-6);
        }
    }

    #[test]
    fn static_smooth_gradient_is_removed() {
        let coords = grid_coords(12, 12);
        let values = Array1::from_shape_fn(144, |i| coords[i][0] * 0.3 + coords[i][1] * 0.2);
        let field_sd = (values.iter().map(|v| v * v).sum::<f64>() / 144.0
            - (values.sum() / 144.0).powi(2))
        .sqrt();
        let fit = prewhiten_static(&values, &coords, &PrewhitenConfig::default()).unwrap();
        let resid_sd = sd(&fit.residuals);
        assert!(
            resid_sd <= 0.1 * field_sd,
            "residual sd {resid_sd} vs field sd {field_sd}"
        );
    }

    #[test]
    fn static_shuffled_field_passes_through() {
        let coords = grid_coords(10, 10);
        let mut rng = stream_rng(6, "shuffle", 0);
        let values = Array1::from_shape_fn(100, |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z
        });
        let fit = prewhiten_static(&values, &coords, &PrewhitenConfig::default()).unwrap();
        let a: Vec<f64> = values.iter().copied().collect();
        let b: Vec<f64> = fit.residuals.iter().copied().collect();
        let r = pearson(&a, &b).unwrap();
        assert!(r >= 0.9, "correlation {r}");
    }

    #[test]
    fn constant_shift_leaves_residuals_unchanged() {
        let coords = grid_coords(8, 8);
        let values = smooth_sample(&coords, 4, 6.0, 0.5, 0.3, 7);
        let shifted = values.mapv(|v| v + 17.5);
        let cfg = PrewhitenConfig::default();
        let a = prewhiten_covariate(&values, &coords, &cfg).unwrap();
        let b = prewhiten_covariate(&shifted, &coords, &cfg).unwrap();
        for (x, y) in a.residuals.iter().zip(b.residuals.iter()) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn prewhitening_is_idempotent_in_trend() {
        let coords = grid_coords(14, 14);
        let mut values = smooth_sample(&coords, 8, 7.0, 0.5, 0.4, 8);
        let mut rng = stream_rng(9, "idem", 0);
        for v in values.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += 0.25 * z;
        }
        let cfg = PrewhitenConfig::default();
        let first = prewhiten_covariate(&values, &coords, &cfg).unwrap();
        let second = prewhiten_covariate(&first.residuals, &coords, &cfg).unwrap();
        let rms = |m: &Array2<f64>| (m.iter().map(|v| v * v).sum::<f64>() / m.len() as f64).sqrt();
        let change = {
            let diff = &second.residuals - &first.residuals;
            rms(&diff)
        };
        assert!(
            change <= 0.1 * rms(&first.residuals),
            "second pass changed residuals by {change}"
        );
    }

    #[test]
    fn rejects_single_location() {
        let values = Array2::zeros((1, 5));
        let coords = vec![[0.0, 0.0]];
        assert!(matches!(
            prewhiten_covariate(&values, &coords, &PrewhitenConfig::default()),
            Err(PrewhitenError::TooSmall { .. })
        ));
    }

    fn sd(m: &Array2<f64>) -> f64 {
        let n = m.len() as f64;
        let mean = m.sum() / n;
        (m.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
    }

    fn incidence_fixture(seed: u64) -> (Array2<f64>, Vec<[f64; 2]>, Vec<f64>) {
        let side = 8usize;
        let n_pix = side * side;
        let coords: Vec<[f64; 2]> = (0..n_pix)
            .map(|i| [(i % side) as f64, (i / side) as f64])
            .collect();
        let n_fac = 10;
        let mut rng = stream_rng(seed, "inc-fixture", 0);
        let facilities: Vec<[f64; 2]> = (0..n_fac)
            .map(|_| {
                [
                    rand::Rng::random_range(&mut rng, 0..side) as f64,
                    rand::Rng::random_range(&mut rng, 0..side) as f64,
                ]
            })
            .collect();
        let travel = Array2::from_shape_fn((n_pix, n_fac), |(i, j)| {
            let dx = coords[i][0] - facilities[j][0];
            let dy = coords[i][1] - facilities[j][1];
            15.0 + 25.0 * (dx * dx + dy * dy).sqrt()
        });
        let pop_tsp = vec![60.0; n_pix];
        (travel, coords, pop_tsp)
    }

    fn incidence_cfg() -> crate::disagg::DisaggConfig {
        crate::disagg::DisaggConfig {
            rff_dim: 12,
            max_iters: 120,
            ..Default::default()
        }
    }

    #[test]
    fn incidence_self_consistency() {
        // counts Poisson-simulated from a constant-rate model: residual
        // means stay within 2 standard errors per facility
        let (travel, coords, pop_tsp) = incidence_fixture(21);
        let months = 10;
        let n_fac = travel.ncols();
        let p = crate::grid::catchment_weights(&travel, &vec![1.0; n_fac], 200.0)
            .unwrap()
            .p;
        let rate = 2e-3;
        let mut rng = stream_rng(22, "inc-sim", 0);
        let mut counts = Array2::zeros((n_fac, months));
        for t in 0..months {
            for j in 0..n_fac {
                let mu: f64 = p
                    .column(j)
                    .iter()
                    .zip(&pop_tsp)
                    .map(|(&pij, &w)| pij * w * rate)
                    .sum();
                counts[(j, t)] =
                    rand_distr::Poisson::new(mu).unwrap().sample(&mut rng) as u64;
            }
        }
        let fit =
            prewhiten_incidence(&counts, &travel, &coords, &pop_tsp, &incidence_cfg()).unwrap();
        assert!(fit.excluded_facilities.is_empty());
        let treat_pop: Vec<f64> = {
            let mut out = vec![0.0; n_fac];
            for (i, row) in fit.catchment.p.rows().into_iter().enumerate() {
                for (j, &pij) in row.iter().enumerate() {
                    out[j] += pij * pop_tsp[i];
                }
            }
            out
        };
        for j in 0..n_fac {
            let mean: f64 =
                (0..months).map(|t| fit.residuals[(j, t)]).sum::<f64>() / months as f64;
            // observed rate has variance mu / treat_pop^2 per month
            let mu = treat_pop[j] * rate;
            let se = (mu / (treat_pop[j] * treat_pop[j]) / months as f64).sqrt();
            assert!(
                mean.abs() <= 2.0 * se + 1e-4,
                "facility {j}: residual mean {mean} vs se {se}"
            );
        }
    }

    #[test]
    fn all_zero_counts_give_nonpositive_residuals() {
        let (travel, coords, pop_tsp) = incidence_fixture(23);
        let counts = Array2::zeros((travel.ncols(), 6));
        let fit =
            prewhiten_incidence(&counts, &travel, &coords, &pop_tsp, &incidence_cfg()).unwrap();
        for r in fit.residuals.iter() {
            assert!(*r <= 1e-12, "residual {r} must be <= 0 for zero counts");
        }
    }

    #[test]
    fn zero_catchment_facility_is_excluded() {
        let (mut travel, coords, pop_tsp) = incidence_fixture(24);
        // push one facility beyond the cutoff for every pixel
        let far = travel.ncols() - 1;
        for i in 0..travel.nrows() {
            travel[(i, far)] = 500.0;
        }
        let mut counts = Array2::zeros((travel.ncols(), 4));
        counts[(0, 1)] = 3;
        let fit =
            prewhiten_incidence(&counts, &travel, &coords, &pop_tsp, &incidence_cfg()).unwrap();
        assert_eq!(fit.excluded_facilities, vec![far]);
        for t in 0..4 {
            assert!(fit.residuals[(far, t)].is_nan());
        }
    }
}
