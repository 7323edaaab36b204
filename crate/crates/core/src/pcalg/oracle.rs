//! Kernel-test-backed independence oracle over a dataset of fine-scale
//! features and an aggregated response.
//!
//! The oracle computes the same statistics as [`crate::citest`], but works
//! in cross-product space: feature matrices and their pairwise Gram blocks
//! are cached per dataset, so each of the many conditional tests issued by
//! the PC search costs small-matrix algebra only, independent of the row
//! count.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use ndarray::prelude::*;

use crate::citest::{self, CiTestConfig, Group, PValueMethod, ScaleTag, VariableView};
use crate::linalg::CholFactor;
use crate::seed::derive_seed;

/// One candidate feature, observed both at the fine scale (sample rows used
/// for tests among covariates) and as weighted groups aligned with the
/// response rows (used for tests against the response).
#[derive(Debug, Clone)]
pub struct CausalFeature {
    pub name: String,
    pub scale_tag: ScaleTag,
    /// Fine-scale sample values, one per covariate row.
    pub fine: Vec<f64>,
    /// One weighted group per response row.
    pub grouped: Vec<Group>,
}

/// The dataset the two-stage search runs on.
#[derive(Debug, Clone)]
pub struct CausalDataset {
    pub features: Vec<CausalFeature>,
    pub response_name: String,
    /// Aggregated response values, one per response row.
    pub response: Vec<f64>,
}

impl CausalDataset {
    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    pub fn n_fine_rows(&self) -> usize {
        self.features.first().map(|f| f.fine.len()).unwrap_or(0)
    }

    pub fn n_response_rows(&self) -> usize {
        self.response.len()
    }

    /// Node names in oracle order: features first, response last.
    pub fn node_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.features.iter().map(|f| f.name.clone()).collect();
        names.push(self.response_name.clone());
        names
    }

    pub fn validate(&self) -> Result<(), String> {
        let nf = self.n_fine_rows();
        let nr = self.n_response_rows();
        for f in &self.features {
            if f.fine.len() != nf {
                return Err(format!(
                    "feature `{}` has {} fine rows, expected {nf}",
                    f.name,
                    f.fine.len()
                ));
            }
            if f.grouped.len() != nr {
                return Err(format!(
                    "feature `{}` has {} group rows, expected {nr}",
                    f.name,
                    f.grouped.len()
                ));
            }
        }
        Ok(())
    }

    /// Row-subsample both observation spaces without replacement, keeping
    /// ascending row order. `fraction` in (0, 1].
    pub fn subsample(&self, fraction: f64, seed: u64) -> CausalDataset {
        assert!(fraction > 0.0 && fraction <= 1.0);
        let fine_idx = sample_indices(self.n_fine_rows(), fraction, seed, "fine");
        let resp_idx = sample_indices(self.n_response_rows(), fraction, seed, "resp");
        CausalDataset {
            features: self
                .features
                .iter()
                .map(|f| CausalFeature {
                    name: f.name.clone(),
                    scale_tag: f.scale_tag,
                    fine: fine_idx.iter().map(|&i| f.fine[i]).collect(),
                    grouped: resp_idx.iter().map(|&i| f.grouped[i].clone()).collect(),
                })
                .collect(),
            response_name: self.response_name.clone(),
            response: resp_idx.iter().map(|&i| self.response[i]).collect(),
        }
    }
}

fn sample_indices(n: usize, fraction: f64, seed: u64, tag: &str) -> Vec<usize> {
    let keep = ((n as f64 * fraction).round() as usize).clamp(1, n);
    if keep == n {
        return (0..n).collect();
    }
    let mut rng = crate::seed::stream_rng(seed, tag, 0);
    let mut all: Vec<usize> = (0..n).collect();
    for i in 0..keep {
        let j = rand::Rng::random_range(&mut rng, i..n);
        all.swap(i, j);
    }
    all.truncate(keep);
    all.sort_unstable();
    all
}

/// Which observation space a test runs in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum Space {
    Fine,
    Response,
}

/// (node, feature count, space)
type FeatureKey = (usize, usize, Space);
/// ((node, dim), (node, dim), space) with the first key <= the second
type BlockKey = (FeatureKey, FeatureKey);

/// Citest-backed oracle. Feature matrices are computed once per
/// (variable, dimension, space) under the dataset seed; pairwise Gram blocks
/// are cached as tests request them; each individual test draws its
/// permutation stream from the test's own identity, so results do not
/// depend on scheduling order.
pub struct DatasetOracle<'a> {
    data: &'a CausalDataset,
    cfg: CiTestConfig,
    features: Mutex<HashMap<FeatureKey, Arc<Array2<f64>>>>,
    blocks: Mutex<HashMap<BlockKey, Arc<Array2<f64>>>>,
}

impl<'a> DatasetOracle<'a> {
    pub fn new(data: &'a CausalDataset, cfg: CiTestConfig) -> Self {
        Self {
            data,
            cfg,
            features: Mutex::new(HashMap::new()),
            blocks: Mutex::new(HashMap::new()),
        }
    }

    fn response_node(&self) -> usize {
        self.data.n_features()
    }

    fn view(&self, node: usize, space: Space) -> VariableView {
        if node == self.response_node() {
            debug_assert_eq!(space, Space::Response);
            return VariableView::scalar(
                self.data.response_name.clone(),
                self.data.response.clone(),
                ScaleTag::Static,
            );
        }
        let f = &self.data.features[node];
        match space {
            Space::Fine => VariableView::scalar(f.name.clone(), f.fine.clone(), f.scale_tag),
            Space::Response => VariableView::group(f.name.clone(), f.grouped.clone(), f.scale_tag),
        }
    }

    fn features_for(&self, key: FeatureKey) -> Result<Arc<Array2<f64>>, String> {
        if let Some(hit) = self.features.lock().unwrap().get(&key) {
            return Ok(hit.clone());
        }
        let (node, d, space) = key;
        let view = self.view(node, space);
        let feats = citest::featurize(&view, d, self.cfg.seed).map_err(|e| e.to_string())?;
        let arc = Arc::new(feats);
        self.features
            .lock()
            .unwrap()
            .entry(key)
            .or_insert_with(|| arc.clone());
        Ok(arc)
    }

    /// `F_a^T F_b` for two cached feature matrices.
    fn block(&self, a: FeatureKey, b: FeatureKey) -> Result<Array2<f64>, String> {
        let (key, transpose) = if a <= b { ((a, b), false) } else { ((b, a), true) };
        let hit = self.blocks.lock().unwrap().get(&key).cloned();
        let stored = match hit {
            Some(block) => block,
            None => {
                let fa = self.features_for(key.0)?;
                let fb = self.features_for(key.1)?;
                let block = Arc::new(fa.t().dot(&*fb));
                self.blocks
                    .lock()
                    .unwrap()
                    .entry(key)
                    .or_insert_with(|| block.clone());
                block
            }
        };
        Ok(if transpose {
            stored.t().to_owned()
        } else {
            stored.as_ref().clone()
        })
    }

    /// Stable identity for a test, symmetric in `(i, j)`.
    fn test_seed(&self, i: usize, j: usize, s: &[usize]) -> u64 {
        let (a, b) = (i.min(j), i.max(j));
        let mut sorted = s.to_vec();
        sorted.sort_unstable();
        let mut h = derive_seed(self.cfg.seed, "test", ((a as u64) << 32) | b as u64);
        for v in sorted {
            h = derive_seed(h, "cond", v as u64);
        }
        h
    }

    /// Unconditional statistic and p-value from cached blocks.
    fn marginal_test(&self, i: usize, j: usize, space: Space, n: usize) -> Result<f64, String> {
        let ki = (i, self.cfg.d_marginal, space);
        let kj = (j, self.cfg.d_marginal, space);
        let cross = self.block(ki, kj)?;
        let statistic = cross.iter().map(|v| v * v).sum::<f64>() / n as f64;
        match self.cfg.pvalue {
            PValueMethod::Gamma => {
                let sxx = self.block(ki, ki)?;
                let syy = self.block(kj, kj)?;
                gamma_from_crossproducts(&sxx, &syy, statistic, n).ok_or_else(|| {
                    "degenerate feature moments in the unconditional test".to_string()
                })
            }
            PValueMethod::Permutation => {
                let fx = self.features_for(ki)?;
                let fy = self.features_for(kj)?;
                citest::test_from_features(&fx, &fy, &self.cfg, self.test_seed(i, j, &[]))
                    .map(|r| r.p_value)
                    .map_err(|e| e.to_string())
            }
        }
    }

    /// Conditional statistic and p-value from cached blocks: residualize the
    /// concatenated `(x, z)` features and the `y` features on the `z`
    /// features in cross-product space.
    fn conditional_test(
        &self,
        i: usize,
        j: usize,
        s: &[usize],
        space: Space,
        n: usize,
    ) -> Result<f64, String> {
        let kx = (i, self.cfg.d_xy, space);
        let ky = (j, self.cfg.d_xy, space);
        let kz: Vec<FeatureKey> = s.iter().map(|&z| (z, self.cfg.d_z, space)).collect();
        let p = 2 * self.cfg.d_xy;
        let m: usize = 2 * self.cfg.d_z * s.len();

        // assemble G = F_z^T F_z, A = F_z^T F_x, By = F_z^T F_y from blocks
        let mut g = Array2::zeros((m, m));
        let mut a = Array2::zeros((m, p));
        let mut by = Array2::zeros((m, p));
        let dz = 2 * self.cfg.d_z;
        for (bi, &kzi) in kz.iter().enumerate() {
            let row = bi * dz;
            a.slice_mut(s![row..row + dz, ..]).assign(&self.block(kzi, kx)?);
            by.slice_mut(s![row..row + dz, ..])
                .assign(&self.block(kzi, ky)?);
            for (bj, &kzj) in kz.iter().enumerate().skip(bi) {
                let col = bj * dz;
                let blk = self.block(kzi, kzj)?;
                g.slice_mut(s![row..row + dz, col..col + dz]).assign(&blk);
                if bi != bj {
                    g.slice_mut(s![col..col + dz, row..row + dz])
                        .assign(&blk.t());
                }
            }
        }
        let fxx = self.block(kx, kx)?;
        let fxy = self.block(kx, ky)?;
        let fyy = self.block(ky, ky)?;

        let mut g_reg = g.clone();
        for d in 0..m {
            g_reg[(d, d)] += self.cfg.ridge * n as f64;
        }
        let chol = CholFactor::new(&g_reg)
            .map_err(|e| format!("ridge system ill-conditioned (dim {m}): {e}"))?;

        // xdot = [F_x | F_z]: F_z^T F_xdot = [A | G]
        let fz_fxdot = ndarray::concatenate(Axis(1), &[a.view(), g.view()]).unwrap();
        let wx = chol.solve_mat(&fz_fxdot); // m x (p + m)
        let wy = chol.solve_mat(&by); // m x p

        // E_x^T E_y = Fxdot^T Fy - Fxdot^T Fz Wy - Wx^T Fz^T Fy + Wx^T G Wy
        let fxdot_fy = ndarray::concatenate(Axis(0), &[fxy.view(), by.view()]).unwrap();
        let fxdot_fz = ndarray::concatenate(Axis(0), &[a.t(), g.view()]).unwrap();
        let exey = &fxdot_fy - &fxdot_fz.dot(&wy) - &wx.t().dot(&by) + &wx.t().dot(&g.dot(&wy));
        let statistic = exey.iter().map(|v| v * v).sum::<f64>() / n as f64;

        match self.cfg.pvalue {
            PValueMethod::Gamma => {
                // Sigma_ex = (Fxdot^T Fxdot - Fxdot^T Fz Wx - Wx^T Fz^T Fxdot + Wx^T G Wx) / n
                let top = ndarray::concatenate(Axis(1), &[fxx.view(), a.t()]).unwrap();
                let bottom = ndarray::concatenate(Axis(1), &[a.view(), g.view()]).unwrap();
                let fxdot_fxdot =
                    ndarray::concatenate(Axis(0), &[top.view(), bottom.view()]).unwrap();
                let sxx = &fxdot_fxdot - &fxdot_fz.dot(&wx) - &wx.t().dot(&fz_fxdot)
                    + &wx.t().dot(&g.dot(&wx));
                let syy = &fyy - &by.t().dot(&wy) - &wy.t().dot(&by) + &wy.t().dot(&g.dot(&wy));
                gamma_from_crossproducts(&sxx, &syy, statistic, n)
                    .ok_or_else(|| "degenerate feature moments in the conditional test".to_string())
            }
            PValueMethod::Permutation => {
                // explicit residual rows; the permutation oracle needs them
                let fx = self.features_for(kx)?;
                let fy = self.features_for(ky)?;
                let fz_parts: Vec<Arc<Array2<f64>>> = kz
                    .iter()
                    .map(|&k| self.features_for(k))
                    .collect::<Result<_, _>>()?;
                let views: Vec<ArrayView2<f64>> = fz_parts.iter().map(|b| b.view()).collect();
                let fz = ndarray::concatenate(Axis(1), &views).unwrap();
                let fxdot =
                    ndarray::concatenate(Axis(1), &[fx.view(), fz.view()]).unwrap();
                let (ex, ey) = citest::residualize_pair(&fxdot, &fy, &fz, self.cfg.ridge)
                    .map_err(|e| e.to_string())?;
                citest::test_from_features(&ex, &ey, &self.cfg, self.test_seed(i, j, s))
                    .map(|r| r.p_value)
                    .map_err(|e| e.to_string())
            }
        }
    }
}

/// Gamma tail p-value from residual cross-products `E^T E` (not yet divided
/// by n). Matches [`citest::gamma_pvalue`] applied to the explicit residual
/// matrices.
fn gamma_from_crossproducts(
    exx: &Array2<f64>,
    eyy: &Array2<f64>,
    statistic: f64,
    n: usize,
) -> Option<f64> {
    let n = n as f64;
    let mean = exx.diag().sum() / n * (eyy.diag().sum() / n);
    let var = 2.0 * exx.iter().map(|v| v * v).sum::<f64>() / (n * n)
        * eyy.iter().map(|v| v * v).sum::<f64>()
        / (n * n);
    if !(mean > 0.0) || !(var > 0.0) {
        return None;
    }
    if statistic <= 0.0 {
        return Some(1.0);
    }
    let theta = var / mean;
    let shape = mean * mean / var;
    Some(statrs::function::gamma::gamma_ur(shape, statistic / theta))
}

impl super::CiOracle for DatasetOracle<'_> {
    fn p_value(&self, i: usize, j: usize, s: &[usize]) -> Result<f64, String> {
        // canonical order makes symmetry in (i, j) exact
        let (i, j) = (i.min(j), i.max(j));
        let resp = self.response_node();
        if s.contains(&resp) {
            return Err("the response cannot appear in a conditioning set".into());
        }
        let space = if i == resp || j == resp {
            Space::Response
        } else {
            Space::Fine
        };
        let n = match space {
            Space::Fine => self.data.n_fine_rows(),
            Space::Response => self.data.n_response_rows(),
        };
        if s.is_empty() {
            if n < 20 {
                return Err(format!("need at least 20 observations, got {n}"));
            }
            self.marginal_test(i, j, space, n)
        } else {
            if n < 50 {
                return Err(format!("need at least 50 observations, got {n}"));
            }
            self.conditional_test(i, j, s, space, n)
        }
    }
}
