//! Spike-and-slab variable selection: a continuous-bimodal prior on the
//! coefficient variances (`beta_l ~ N(0, phi_l tau_l^2)` with `phi_l` a
//! two-point mixture), sampled by Gibbs. The Gaussian-likelihood path is
//! fully conjugate; the Poisson disaggregation path updates coefficients by
//! adaptive random-walk Metropolis within the same Gibbs sweep.

use ndarray::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::citest::ScaleTag;
use crate::disagg::DisaggData;
use crate::linalg::{CholFactor, LinalgError};
use crate::pcalg::{select_features, FeatureScore};
use crate::seed::stream_rng;

#[derive(Debug, Error)]
pub enum SpikeSlabError {
    #[error("design matrix is singular: {0}")]
    SingularDesign(#[from] LinalgError),
    #[error("no post-burn-in draws (steps {steps} <= burn_in {burn_in})")]
    NoDraws { steps: usize, burn_in: usize },
    #[error("dimension mismatch: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SpikeSlabConfig {
    /// Gamma shape on the precision `tau^-2`.
    pub a1: f64,
    /// Gamma scale on the precision; the prior mean of `tau^-2` is `a1 a2`.
    pub a2: f64,
    /// Spike variance multiplier.
    pub nu0: f64,
    pub chains: usize,
    pub burn_in: usize,
    /// Total steps per chain, burn-in included.
    pub steps: usize,
    pub seed: u64,
}

impl Default for SpikeSlabConfig {
    fn default() -> Self {
        Self {
            a1: 40.0,
            a2: 0.025,
            nu0: 0.01,
            chains: 4,
            burn_in: 500,
            steps: 3000,
            seed: 0,
        }
    }
}

/// What the coefficients are fit against.
pub enum Likelihood<'a> {
    /// Centered response, standardized design; the noise variance gets a
    /// weak inverse-gamma prior and a conjugate update.
    Gaussian {
        x: &'a Array2<f64>,
        y: &'a Array1<f64>,
    },
    /// The Poisson disaggregation data term with a linear covariate effect
    /// (spatial field held at zero, catchment fixed). The intercept is
    /// sampled under its own N(0, 2^2) prior.
    Poisson { data: &'a DisaggData },
    /// No data term: Gibbs on the prior alone.
    PriorOnly { n_features: usize },
}

impl Likelihood<'_> {
    fn n_features(&self) -> usize {
        match self {
            Likelihood::Gaussian { x, .. } => x.ncols(),
            Likelihood::Poisson { data } => data.covariates.len(),
            Likelihood::PriorOnly { n_features } => *n_features,
        }
    }
}

/// One retained draw.
#[derive(Debug, Clone)]
pub struct Draw {
    pub chain: usize,
    pub beta: Vec<f64>,
    /// Each entry exactly `nu0` or `1.0`.
    pub phi: Vec<f64>,
    pub tau2: Vec<f64>,
    pub w: f64,
}

#[derive(Debug, Clone)]
pub struct PosteriorSamples {
    pub draws: Vec<Draw>,
    pub n_features: usize,
    /// Split-Rhat per coefficient, for diagnostics.
    pub split_rhat: Vec<f64>,
    /// True when any split-Rhat exceeds 1.1.
    pub rhat_flagged: bool,
}

struct ChainState {
    beta: Vec<f64>,
    beta0: f64,
    phi: Vec<f64>,
    tau2: Vec<f64>,
    w: f64,
    sigma2: f64,
    /// adaptive RW step sizes (Poisson path)
    log_step: Vec<f64>,
    accepts: Vec<usize>,
    proposals: Vec<usize>,
}

fn poisson_nll(data: &DisaggData, beta0: f64, beta: &[f64]) -> f64 {
    let (n_pix, months) = (data.n_pixels(), data.n_months());
    let pop = &data.pop_tsp;
    let mut value = 0.0;
    for t in 0..months {
        let mut s = Array1::zeros(n_pix);
        for i in 0..n_pix {
            let mut eta = beta0;
            for (x, b) in data.covariates.iter().zip(beta) {
                eta += b * x[(i, t)];
            }
            s[i] = eta.exp() * pop[i];
        }
        let mu = data.p.t().dot(&s);
        for (j, &m) in mu.iter().enumerate() {
            let y = data.counts[(j, t)];
            if m <= 0.0 {
                if y > 0.0 {
                    return f64::INFINITY;
                }
                continue;
            }
            value += m - y * m.ln();
        }
    }
    value
}

fn run_chain(
    likelihood: &Likelihood,
    cfg: &SpikeSlabConfig,
    chain: usize,
) -> Result<Vec<Draw>, SpikeSlabError> {
    let k = likelihood.n_features();
    let mut rng = stream_rng(cfg.seed, "spikeslab-chain", chain as u64);
    let mut state = ChainState {
        beta: vec![0.0; k],
        beta0: match likelihood {
            Likelihood::Poisson { data } => {
                let total: f64 = data.counts.sum();
                let treat_pop: f64 = data
                    .p
                    .rows()
                    .into_iter()
                    .zip(&data.pop_tsp)
                    .map(|(row, &w)| row.sum() * w)
                    .sum();
                (total.max(0.5) / (treat_pop * data.n_months() as f64)).ln()
            }
            _ => 0.0,
        },
        phi: vec![1.0; k],
        tau2: vec![1.0 / (cfg.a1 * cfg.a2); k],
        w: 0.5,
        sigma2: 1.0,
        log_step: vec![(0.1f64).ln(); k + 1],
        accepts: vec![0; k + 1],
        proposals: vec![0; k + 1],
    };

    // cached Poisson data-term value for the current coefficients
    let mut current_nll = match likelihood {
        Likelihood::Poisson { data } => poisson_nll(data, state.beta0, &state.beta),
        _ => 0.0,
    };

    let mut kept = Vec::with_capacity(cfg.steps.saturating_sub(cfg.burn_in));
    for step in 0..cfg.steps {
        // 1. coefficients
        match likelihood {
            Likelihood::Gaussian { x, y } => {
                gaussian_beta_update(x, y, &mut state, &mut rng)?;
            }
            Likelihood::Poisson { data } => {
                poisson_beta_update(data, &mut state, &mut current_nll, step, cfg, &mut rng);
            }
            Likelihood::PriorOnly { .. } => {
                for l in 0..k {
                    let sd = (state.phi[l] * state.tau2[l]).sqrt();
                    let z: f64 = StandardNormal.sample(&mut rng);
                    state.beta[l] = sd * z;
                }
            }
        }

        // 2. spike indicators: two-point conditional
        for l in 0..k {
            let b2 = state.beta[l] * state.beta[l];
            let slab = state.w * normal_density(b2, state.tau2[l]);
            let spike = (1.0 - state.w) * normal_density(b2, cfg.nu0 * state.tau2[l]);
            let p_slab = if slab + spike > 0.0 {
                slab / (slab + spike)
            } else {
                0.5
            };
            state.phi[l] = if rng.random::<f64>() < p_slab { 1.0 } else { cfg.nu0 };
        }

        // 3. precisions: Gamma conditional
        for l in 0..k {
            let shape = cfg.a1 + 0.5;
            let rate = 1.0 / cfg.a2 + state.beta[l] * state.beta[l] / (2.0 * state.phi[l]);
            let g = Gamma::new(shape, 1.0 / rate).unwrap();
            let prec: f64 = g.sample(&mut rng);
            state.tau2[l] = 1.0 / prec;
        }

        // 4. mixing weight: Beta conditional from the indicator counts
        let slab_count = state.phi.iter().filter(|p| **p == 1.0).count();
        let beta_dist = Beta::new(
            1.0 + slab_count as f64,
            1.0 + (k - slab_count) as f64,
        )
        .unwrap();
        state.w = beta_dist.sample(&mut rng);

        // 5. Gaussian noise variance (weak inverse-gamma prior)
        if let Likelihood::Gaussian { x, y } = likelihood {
            let resid = *y - &x.dot(&Array1::from(state.beta.clone()));
            let rss: f64 = resid.dot(&resid);
            let shape = 0.01 + y.len() as f64 / 2.0;
            let rate = 0.01 + rss / 2.0;
            let g = Gamma::new(shape, 1.0 / rate).unwrap();
            let prec: f64 = g.sample(&mut rng);
            state.sigma2 = 1.0 / prec;
        }

        if step >= cfg.burn_in {
            kept.push(Draw {
                chain,
                beta: state.beta.clone(),
                phi: state.phi.clone(),
                tau2: state.tau2.clone(),
                w: state.w,
            });
        }
    }
    Ok(kept)
}

/// Exp of `-b^2 / (2 v)` over `sqrt(v)`; the shared Gaussian factor cancels.
fn normal_density(b2: f64, v: f64) -> f64 {
    (-b2 / (2.0 * v)).exp() / v.sqrt()
}

fn gaussian_beta_update(
    x: &Array2<f64>,
    y: &Array1<f64>,
    state: &mut ChainState,
    rng: &mut ChaCha8Rng,
) -> Result<(), SpikeSlabError> {
    let k = x.ncols();
    // precision A = X^T X / sigma^2 + Gamma^{-1}
    let mut a = x.t().dot(x) / state.sigma2;
    for l in 0..k {
        a[(l, l)] += 1.0 / (state.phi[l] * state.tau2[l]);
    }
    let chol = CholFactor::new(&a)?;
    let rhs = x.t().dot(y) / state.sigma2;
    let mean = chol.solve_vec(&rhs);
    // draw = mean + L^{-T} z
    let z = Array1::from_shape_fn(k, |_| {
        let v: f64 = StandardNormal.sample(rng);
        v
    });
    let lt = chol.lower().t().to_owned();
    let noise = ndarray_linalg::SolveTriangular::solve_triangular(
        &lt,
        ndarray_linalg::UPLO::Upper,
        ndarray_linalg::Diag::NonUnit,
        &z,
    )
    .expect("triangular solve");
    for l in 0..k {
        state.beta[l] = mean[l] + noise[l];
    }
    Ok(())
}

fn poisson_beta_update(
    data: &DisaggData,
    state: &mut ChainState,
    current_nll: &mut f64,
    step: usize,
    cfg: &SpikeSlabConfig,
    rng: &mut ChaCha8Rng,
) {
    let k = state.beta.len();
    // coordinates 0..k are the coefficients, k is the intercept
    for coord in 0..=k {
        let step_sd = state.log_step[coord].exp();
        let z: f64 = StandardNormal.sample(rng);
        let proposal = step_sd * z;

        let (old_val, prior_var) = if coord < k {
            (state.beta[coord], state.phi[coord] * state.tau2[coord])
        } else {
            (state.beta0, 4.0)
        };
        let new_val = old_val + proposal;

        let new_nll = if coord < k {
            let mut beta = state.beta.clone();
            beta[coord] = new_val;
            poisson_nll(data, state.beta0, &beta)
        } else {
            poisson_nll(data, new_val, &state.beta)
        };
        let log_accept = (*current_nll - new_nll)
            + (old_val * old_val - new_val * new_val) / (2.0 * prior_var);
        state.proposals[coord] += 1;
        if log_accept.is_finite() && rng.random::<f64>().ln() < log_accept {
            if coord < k {
                state.beta[coord] = new_val;
            } else {
                state.beta0 = new_val;
            }
            *current_nll = new_nll;
            state.accepts[coord] += 1;
        }

        // adapt during burn-in toward the 0.2-0.4 acceptance window
        if step < cfg.burn_in && state.proposals[coord] % 25 == 0 {
            let rate = state.accepts[coord] as f64 / state.proposals[coord] as f64;
            state.log_step[coord] += 0.5 * (rate - 0.3);
        }
    }
}

/// Split-Rhat over the per-chain coefficient histories.
fn split_rhat(histories: &[Vec<Vec<f64>>], n_features: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n_features);
    for l in 0..n_features {
        let mut sequences: Vec<Vec<f64>> = Vec::new();
        for chain in histories {
            let series: Vec<f64> = chain.iter().map(|draw| draw[l]).collect();
            let half = series.len() / 2;
            if half >= 2 {
                sequences.push(series[..half].to_vec());
                sequences.push(series[half..].to_vec());
            }
        }
        if sequences.len() < 2 {
            out.push(1.0);
            continue;
        }
        let n = sequences.iter().map(|s| s.len()).min().unwrap() as f64;
        let means: Vec<f64> = sequences
            .iter()
            .map(|s| s.iter().sum::<f64>() / s.len() as f64)
            .collect();
        let grand = means.iter().sum::<f64>() / means.len() as f64;
        let b = n / (means.len() as f64 - 1.0)
            * means.iter().map(|m| (m - grand) * (m - grand)).sum::<f64>();
        let w = sequences
            .iter()
            .zip(&means)
            .map(|(s, m)| {
                s.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (s.len() as f64 - 1.0)
            })
            .sum::<f64>()
            / sequences.len() as f64;
        if w <= 0.0 {
            out.push(1.0);
        } else {
            out.push((((n - 1.0) / n * w + b / n) / w).sqrt());
        }
    }
    out
}

/// Run the Gibbs sampler: `chains` independent seeded chains in parallel,
/// burn-in discarded, draws pooled in chain order.
pub fn mcmc_sample(
    likelihood: &Likelihood,
    cfg: &SpikeSlabConfig,
) -> Result<PosteriorSamples, SpikeSlabError> {
    if cfg.steps <= cfg.burn_in {
        return Err(SpikeSlabError::NoDraws {
            steps: cfg.steps,
            burn_in: cfg.burn_in,
        });
    }
    if let Likelihood::Gaussian { x, y } = likelihood {
        if x.nrows() != y.len() {
            return Err(SpikeSlabError::Mismatch(format!(
                "{} rows vs {} responses",
                x.nrows(),
                y.len()
            )));
        }
    }
    let per_chain: Vec<Result<Vec<Draw>, SpikeSlabError>> = (0..cfg.chains)
        .into_par_iter()
        .map(|chain| run_chain(likelihood, cfg, chain))
        .collect();

    let n_features = likelihood.n_features();
    let mut draws = Vec::new();
    let mut histories: Vec<Vec<Vec<f64>>> = Vec::new();
    for result in per_chain {
        let chain_draws = result?;
        histories.push(chain_draws.iter().map(|d| d.beta.clone()).collect());
        draws.extend(chain_draws);
    }
    let rhat = split_rhat(&histories, n_features);
    let flagged = rhat.iter().any(|r| *r > 1.1);
    Ok(PosteriorSamples {
        draws,
        n_features,
        split_rhat: rhat,
        rhat_flagged: flagged,
    })
}

/// Fraction of pooled draws with `phi_l = 1`.
pub fn inclusion_probabilities(samples: &PosteriorSamples) -> Vec<f64> {
    let mut counts = vec![0usize; samples.n_features];
    for draw in &samples.draws {
        for (l, &phi) in draw.phi.iter().enumerate() {
            if phi == 1.0 {
                counts[l] += 1;
            }
        }
    }
    counts
        .iter()
        .map(|&c| c as f64 / samples.draws.len() as f64)
        .collect()
}

/// Top-k-per-class selection on inclusion probabilities; the same rule (and
/// implementation) as the causal ranking's selection.
pub fn threshold_select(
    probabilities: &[f64],
    names: &[String],
    scale_tags: &[ScaleTag],
    k_static: usize,
    k_dynamic: usize,
) -> Vec<String> {
    let scores: Vec<FeatureScore> = names
        .iter()
        .zip(scale_tags)
        .zip(probabilities)
        .map(|((name, tag), p)| FeatureScore {
            name: name.clone(),
            scale_tag: *tag,
            score: *p,
        })
        .collect();
    select_features(&scores, k_static, k_dynamic)
}

/// `feature,scale_tag,probability` rows.
pub fn write_probability_csv<W: std::io::Write>(
    names: &[String],
    scale_tags: &[ScaleTag],
    probabilities: &[f64],
    mut w: W,
) -> std::io::Result<()> {
    writeln!(w, "feature,scale_tag,probability")?;
    for ((name, tag), p) in names.iter().zip(scale_tags).zip(probabilities) {
        writeln!(w, "{name},{tag},{p}")?;
    }
    Ok(())
}
