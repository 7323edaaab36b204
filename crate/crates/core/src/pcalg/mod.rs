//! Constraint-based causal discovery: the PC algorithm, its response-aware
//! two-stage variant, bootstrap feature ranking, and top-k-per-class
//! selection.

mod bootstrap;
mod oracle;
mod pdag;
mod search;

pub use bootstrap::{
    bootstrap_rank, select_features, write_ranking_csv, BootstrapConfig, FeatureRanking,
    FeatureScore,
};
pub use oracle::{CausalDataset, CausalFeature, DatasetOracle};
pub use pdag::{sepset_key, Mark, Pdag, Sepsets};
pub use search::{
    cpdag_from_parents, meek_orient, orient_v_structures, pc_skeleton, pc_two_stage,
    TwoStageResult,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PcalgError {
    #[error("independence oracle failed for ({i}, {j} | {sepset:?}): {detail}")]
    Oracle {
        i: usize,
        j: usize,
        sepset: Vec<usize>,
        detail: String,
    },
    #[error("all {0} bootstrap runs failed")]
    AllBootstrapRunsFailed(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("parse: {0}")]
    Parse(String),
}

/// A conditional-independence oracle: p-value for `i` and `j` being
/// independent given the conditioning set `s`. Implementations must be
/// symmetric in `(i, j)` and deterministic given their seed.
pub trait CiOracle: Sync {
    fn p_value(&self, i: usize, j: usize, s: &[usize]) -> Result<f64, String>;
}
