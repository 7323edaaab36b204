//! Bootstrap ranking of candidate features by how often they survive as
//! direct parents of the response, and the top-k-per-class selection rule.

use std::io::Write;

use rayon::prelude::*;

use super::oracle::{CausalDataset, DatasetOracle};
use super::search::pc_two_stage;
use super::PcalgError;
use crate::citest::{CiTestConfig, ScaleTag};
use crate::seed::derive_seed;

#[derive(Debug, Clone)]
pub struct BootstrapConfig {
    /// Number of bootstrap runs.
    pub runs: usize,
    /// Row-subsample fraction, without replacement.
    pub fraction: f64,
    pub alpha: f64,
    pub max_depth: usize,
    pub citest: CiTestConfig,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            runs: 20,
            fraction: 0.7,
            alpha: 0.05,
            max_depth: 3,
            citest: CiTestConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureScore {
    pub name: String,
    pub scale_tag: ScaleTag,
    /// Fraction of successful bootstrap graphs in which the feature is
    /// adjacent to the response.
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct FeatureRanking {
    pub scores: Vec<FeatureScore>,
    /// Successful bootstrap runs (the score denominator).
    pub runs: usize,
    pub failed_runs: usize,
}

/// Run `pc_two_stage` on `runs` row-subsamples and score each feature by the
/// fraction of runs in which it stays adjacent to the response. Failed runs
/// are excluded from the denominator; the scores are a relative ranking, not
/// probabilities. Runs are independent and execute in parallel, each on its
/// own derived seed, so the ranking is reproducible.
pub fn bootstrap_rank(
    data: &CausalDataset,
    cfg: &BootstrapConfig,
) -> Result<FeatureRanking, PcalgError> {
    if cfg.runs == 0 {
        return Err(PcalgError::InvalidConfig("need at least one run".into()));
    }
    if !(cfg.fraction > 0.0 && cfg.fraction <= 1.0) {
        return Err(PcalgError::InvalidConfig(format!(
            "subsample fraction must lie in (0, 1], got {}",
            cfg.fraction
        )));
    }
    data.validate().map_err(PcalgError::InvalidConfig)?;

    let names = data.node_names();
    let response = data.n_features();

    let outcomes: Vec<Result<Vec<bool>, PcalgError>> = (0..cfg.runs)
        .into_par_iter()
        .map(|run| {
            let sub = data.subsample(cfg.fraction, derive_seed(cfg.seed, "bootstrap", run as u64));
            let citest_cfg = CiTestConfig {
                seed: derive_seed(cfg.seed, "bootstrap-citest", run as u64),
                ..cfg.citest.clone()
            };
            let oracle = DatasetOracle::new(&sub, citest_cfg);
            let result = pc_two_stage(&oracle, names.clone(), cfg.alpha, cfg.max_depth)?;
            Ok((0..response)
                .map(|i| result.graph.has_edge(i, response))
                .collect())
        })
        .collect();

    let mut counts = vec![0usize; response];
    let mut successes = 0usize;
    let mut failed = 0usize;
    for outcome in outcomes {
        match outcome {
            Ok(adjacent) => {
                successes += 1;
                for (i, hit) in adjacent.iter().enumerate() {
                    if *hit {
                        counts[i] += 1;
                    }
                }
            }
            Err(_) => failed += 1,
        }
    }
    if successes == 0 {
        return Err(PcalgError::AllBootstrapRunsFailed(cfg.runs));
    }

    let scores = data
        .features
        .iter()
        .zip(&counts)
        .map(|(f, &c)| FeatureScore {
            name: f.name.clone(),
            scale_tag: f.scale_tag,
            score: c as f64 / successes as f64,
        })
        .collect();

    Ok(FeatureRanking {
        scores,
        runs: successes,
        failed_runs: failed,
    })
}

/// Top `k_static` static-tagged and `k_dynamic` dynamic-tagged features by
/// score, ties broken by lexicographic name. Short categories yield all
/// their members.
pub fn select_features(
    scores: &[FeatureScore],
    k_static: usize,
    k_dynamic: usize,
) -> Vec<String> {
    let top = |is_static: bool, k: usize| -> Vec<String> {
        let mut class: Vec<&FeatureScore> = scores
            .iter()
            .filter(|s| (s.scale_tag == ScaleTag::Static) == is_static)
            .collect();
        class.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap()
                .then_with(|| a.name.cmp(&b.name))
        });
        class.into_iter().take(k).map(|s| s.name.clone()).collect()
    };
    let mut out = top(true, k_static);
    out.extend(top(false, k_dynamic));
    out
}

/// `feature,scale_tag,score` rows.
pub fn write_ranking_csv<W: Write>(ranking: &FeatureRanking, mut w: W) -> std::io::Result<()> {
    writeln!(w, "feature,scale_tag,score")?;
    for s in &ranking.scores {
        writeln!(w, "{},{},{}", s.name, s.scale_tag, s.score)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn score(name: &str, tag: ScaleTag, score: f64) -> FeatureScore {
        FeatureScore {
            name: name.into(),
            scale_tag: tag,
            score,
        }
    }

    #[test]
    fn selects_top_four_per_class() {
        let scores = vec![
            score("s1", ScaleTag::Static, 0.9),
            score("s2", ScaleTag::Static, 0.8),
            score("s3", ScaleTag::Static, 0.7),
            score("s4", ScaleTag::Static, 0.6),
            score("s5", ScaleTag::Static, 0.5),
            score("d1", ScaleTag::Dynamic(0), 0.95),
            score("d2", ScaleTag::Dynamic(1), 0.4),
            score("d3", ScaleTag::Dynamic(2), 0.3),
            score("d4", ScaleTag::Dynamic(3), 0.2),
            score("d5", ScaleTag::Dynamic(0), 0.1),
        ];
        let sel = select_features(&scores, 4, 4);
        assert_eq!(sel, vec!["s1", "s2", "s3", "s4", "d1", "d2", "d3", "d4"]);
    }

    #[test]
    fn tie_at_rank_four_goes_alphabetical() {
        let scores = vec![
            score("b", ScaleTag::Static, 0.5),
            score("a", ScaleTag::Static, 0.5),
            score("c", ScaleTag::Static, 0.9),
            score("d", ScaleTag::Static, 0.9),
            score("e", ScaleTag::Static, 0.9),
        ];
        let sel = select_features(&scores, 4, 4);
        // three at 0.9, then the 0.5 tie: `a` beats `b`
        assert_eq!(sel, vec!["c", "d", "e", "a"]);
    }

    #[test]
    fn short_category_returns_all() {
        let scores = vec![
            score("d1", ScaleTag::Dynamic(0), 0.3),
            score("d2", ScaleTag::Dynamic(1), 0.2),
            score("d3", ScaleTag::Dynamic(2), 0.1),
        ];
        let sel = select_features(&scores, 4, 4);
        assert_eq!(sel, vec!["d1", "d2", "d3"]);
    }

    #[test]
    fn ranking_csv_format() {
        let ranking = FeatureRanking {
            scores: vec![
                score("rain", ScaleTag::Dynamic(2), 0.75),
                score("elev", ScaleTag::Static, 1.0),
            ],
            runs: 20,
            failed_runs: 0,
        };
        let mut buf = Vec::new();
        write_ranking_csv(&ranking, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "feature,scale_tag,score\nrain,dynamic(2),0.75\nelev,static,1\n"
        );
    }
}
