//! Pipeline configuration: JSON file with defaults, overridable by flags.

use causemap::spikeslab::SpikeSlabConfig;
use causemap::synth::ScenarioConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RollingConfig {
    /// Training window length in months.
    pub train_len: usize,
    /// Forecast horizon in months.
    pub horizon: usize,
    /// Number of rolling iterations (start month advances by one each time).
    pub iterations: usize,
}

impl Default for RollingConfig {
    fn default() -> Self {
        Self {
            train_len: 12,
            horizon: 12,
            iterations: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub scenario: ScenarioConfig,
    /// Significance level of the independence tests inside PC.
    pub alpha: f64,
    pub bootstrap_runs: usize,
    pub subsample_fraction: f64,
    pub max_depth: usize,
    /// Feature counts of the kernel tests.
    pub d_marginal: usize,
    pub d_xy: usize,
    pub d_z: usize,
    pub ridge: f64,
    /// `gamma` or `perm`.
    pub pvalue: String,
    pub n_perm: usize,
    pub k_static: usize,
    pub k_dynamic: usize,
    /// Fine-scale (pixel, month) sample rows for tests among covariates.
    pub n_fine_rows: usize,
    pub prewhiten_rff_dim: usize,
    pub prewhiten_dense_limit: usize,
    /// Basis size and budget of the no-covariate incidence model.
    pub incidence_rff_dim: usize,
    pub incidence_max_iters: usize,
    /// Basis size and budget of the regression model.
    pub disagg_rff_dim: usize,
    pub disagg_max_iters: usize,
    pub spikeslab: SpikeSlabConfig,
    pub rolling: RollingConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig::default(),
            alpha: 0.05,
            bootstrap_runs: 20,
            subsample_fraction: 0.7,
            max_depth: 3,
            d_marginal: 100,
            d_xy: 5,
            d_z: 100,
            ridge: 1e-3,
            pvalue: "gamma".into(),
            n_perm: 500,
            k_static: 4,
            k_dynamic: 4,
            n_fine_rows: 800,
            prewhiten_rff_dim: 500,
            prewhiten_dense_limit: 2000,
            incidence_rff_dim: 64,
            incidence_max_iters: 200,
            disagg_rff_dim: 200,
            disagg_max_iters: 400,
            spikeslab: SpikeSlabConfig::default(),
            rolling: RollingConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn citest(&self, seed: u64) -> Result<causemap::citest::CiTestConfig, String> {
        let pvalue = match self.pvalue.as_str() {
            "gamma" => causemap::citest::PValueMethod::Gamma,
            "perm" => causemap::citest::PValueMethod::Permutation,
            other => return Err(format!("unknown p-value method `{other}` (gamma|perm)")),
        };
        Ok(causemap::citest::CiTestConfig {
            d_marginal: self.d_marginal,
            d_xy: self.d_xy,
            d_z: self.d_z,
            ridge: self.ridge,
            pvalue,
            n_perm: self.n_perm,
            seed,
        })
    }

    pub fn prewhiten(&self) -> causemap::prewhiten::PrewhitenConfig {
        causemap::prewhiten::PrewhitenConfig {
            rff_dim: self.prewhiten_rff_dim,
            dense_limit: self.prewhiten_dense_limit,
            ..Default::default()
        }
    }

    pub fn incidence_disagg(&self, seed: u64) -> causemap::disagg::DisaggConfig {
        causemap::disagg::DisaggConfig {
            rff_dim: self.incidence_rff_dim,
            max_iters: self.incidence_max_iters,
            seed,
            ..Default::default()
        }
    }

    pub fn regression_disagg(&self, seed: u64) -> causemap::disagg::DisaggConfig {
        causemap::disagg::DisaggConfig {
            rff_dim: self.disagg_rff_dim,
            max_iters: self.disagg_max_iters,
            seed,
            learn_attractiveness: true,
            ..Default::default()
        }
    }
}
