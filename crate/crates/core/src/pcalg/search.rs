//! The PC algorithm: skeleton discovery, v-structure orientation, Meek
//! propagation, and the response-aware two-stage variant.

use super::pdag::{sepset_key, Mark, Pdag, Sepsets};
use super::{CiOracle, PcalgError};

/// Iterate size-`k` subsets of `pool` in lexicographic index order.
fn for_each_subset<F: FnMut(&[usize]) -> Result<bool, PcalgError>>(
    pool: &[usize],
    k: usize,
    f: &mut F,
) -> Result<bool, PcalgError> {
    if k > pool.len() {
        return Ok(false);
    }
    let mut idx: Vec<usize> = (0..k).collect();
    let mut subset = vec![0usize; k];
    loop {
        for (slot, &i) in idx.iter().enumerate() {
            subset[slot] = pool[i];
        }
        if f(&subset)? {
            return Ok(true);
        }
        // next combination
        let mut pos = k;
        loop {
            if pos == 0 {
                return Ok(false);
            }
            pos -= 1;
            if idx[pos] != pos + pool.len() - k {
                break;
            }
            if pos == 0 {
                return Ok(false);
            }
        }
        idx[pos] += 1;
        for later in (pos + 1)..k {
            idx[later] = idx[later - 1] + 1;
        }
    }
}

fn oracle_test(
    oracle: &dyn CiOracle,
    i: usize,
    j: usize,
    s: &[usize],
) -> Result<f64, PcalgError> {
    oracle.p_value(i, j, s).map_err(|detail| PcalgError::Oracle {
        i,
        j,
        sepset: s.to_vec(),
        detail,
    })
}

/// Stage 1 of PC: start from the complete undirected graph over `names` and
/// remove edges by conditional independence, recording the separating set of
/// each removal. Pairs are processed in lexicographic order and conditioning
/// subsets in lexicographic index order, so the output is deterministic for a
/// deterministic oracle.
pub fn pc_skeleton(
    oracle: &dyn CiOracle,
    names: Vec<String>,
    alpha: f64,
    max_depth: usize,
) -> Result<(Pdag, Sepsets), PcalgError> {
    assert!(alpha > 0.0 && alpha < 1.0, "alpha must lie in (0, 1)");
    let n = names.len();
    let mut graph = Pdag::complete_undirected(names);
    let mut sepsets = Sepsets::new();

    for depth in 0..=max_depth {
        // does any adjacency set still admit a size-`depth` conditioning set?
        let feasible = (0..n).any(|i| graph.adjacency(i).len() > depth);
        if !feasible {
            break;
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if !graph.has_edge(i, j) {
                    continue;
                }
                let mut removed = false;
                for (a, b) in [(i, j), (j, i)] {
                    let pool: Vec<usize> = graph
                        .adjacency(a)
                        .into_iter()
                        .filter(|&x| x != b)
                        .collect();
                    let found = for_each_subset(&pool, depth, &mut |s: &[usize]| {
                        let p = oracle_test(oracle, i, j, s)?;
                        if p >= alpha {
                            sepsets.insert(sepset_key(i, j), s.to_vec());
                            Ok(true)
                        } else {
                            Ok(false)
                        }
                    })?;
                    if found {
                        graph.remove_edge(i, j);
                        removed = true;
                        break;
                    }
                }
                let _ = removed;
            }
        }
    }
    Ok((graph, sepsets))
}

/// Orient unshielded colliders: for each triple `x - y - z` with `x, z`
/// nonadjacent and `y` outside `sepset(x, z)`, demand `x -> y <- z`.
/// An edge demanded in both directions is left undirected and counted as a
/// conflict.
pub fn orient_v_structures(skeleton: &Pdag, sepsets: &Sepsets) -> Pdag {
    let n = skeleton.n_nodes();
    let mut demanded: Vec<(usize, usize)> = Vec::new();
    for y in 0..n {
        let adj = skeleton.adjacency(y);
        for (ai, &x) in adj.iter().enumerate() {
            for &z in adj.iter().skip(ai + 1) {
                if skeleton.has_edge(x, z) {
                    continue; // shielded
                }
                let separated_by_y = sepsets
                    .get(&sepset_key(x, z))
                    .map(|s| s.contains(&y))
                    .unwrap_or(true);
                if !separated_by_y {
                    demanded.push((x, y));
                    demanded.push((z, y));
                }
            }
        }
    }

    let mut graph = skeleton.clone();
    let mut conflicts = 0;
    for &(a, b) in &demanded {
        if demanded.contains(&(b, a)) {
            continue; // contested: leave undirected
        }
        graph.orient(a, b);
    }
    // count each contested edge once
    let mut seen = std::collections::HashSet::new();
    for &(a, b) in &demanded {
        if demanded.contains(&(b, a)) && seen.insert(sepset_key(a, b)) {
            conflicts += 1;
        }
    }
    graph.v_conflicts = conflicts;
    graph
}

/// Apply Meek's orientation-propagation rules to fixpoint.
///
/// R1: `a -> b -- c` with `a, c` nonadjacent orients `b -> c`.
/// R2: `a -> b -> c` with `a -- c` orients `a -> c`.
/// R3: `a -- b` with two nonadjacent `c, d` where `a -- c -> b` and
///     `a -- d -> b` orients `a -> b`.
/// R4: `a -- b` with `a -- d` and a directed path `d -> c -> b`, `d, b`
///     nonadjacent, orients `a -> b`.
pub fn meek_orient(pdag: &Pdag) -> Pdag {
    let mut g = pdag.clone();
    let n = g.n_nodes();
    loop {
        let mut changed = false;

        // R1
        for b in 0..n {
            for a in g.parents(b) {
                for c in g.undirected_neighbors(b) {
                    if c != a && !g.has_edge(a, c) {
                        g.orient(b, c);
                        changed = true;
                    }
                }
            }
        }

        // R2
        for a in 0..n {
            for c in g.undirected_neighbors(a) {
                let via_chain = g
                    .children(a)
                    .into_iter()
                    .any(|b| g.is_directed(b, c));
                if via_chain {
                    g.orient(a, c);
                    changed = true;
                }
            }
        }

        // R3
        for a in 0..n {
            for b in g.undirected_neighbors(a) {
                let candidates: Vec<usize> = g
                    .undirected_neighbors(a)
                    .into_iter()
                    .filter(|&c| c != b && g.is_directed(c, b))
                    .collect();
                let mut fire = false;
                'outer: for (ci, &c) in candidates.iter().enumerate() {
                    for &d in candidates.iter().skip(ci + 1) {
                        if !g.has_edge(c, d) {
                            fire = true;
                            break 'outer;
                        }
                    }
                }
                if fire {
                    g.orient(a, b);
                    changed = true;
                }
            }
        }

        // R4
        for a in 0..n {
            for b in g.undirected_neighbors(a) {
                let mut fire = false;
                'outer4: for d in g.undirected_neighbors(a) {
                    if d == b || g.has_edge(d, b) {
                        continue;
                    }
                    for c in g.children(d) {
                        if c != a && c != b && g.is_directed(c, b) {
                            fire = true;
                            break 'outer4;
                        }
                    }
                }
                if fire {
                    g.orient(a, b);
                    changed = true;
                }
            }
        }

        if !changed {
            return g;
        }
    }
}

/// The CPDAG of a DAG given as per-node parent lists: skeleton plus the
/// DAG's unshielded colliders, propagated by Meek's rules.
pub fn cpdag_from_parents(names: Vec<String>, parents: &[Vec<usize>]) -> Pdag {
    let n = names.len();
    assert_eq!(parents.len(), n);
    let mut skeleton = Pdag::empty(names);
    for (child, pa) in parents.iter().enumerate() {
        for &p in pa {
            skeleton.set_undirected(p, child);
        }
    }
    let mut oriented = skeleton.clone();
    let mut any = false;
    for (y, pa) in parents.iter().enumerate() {
        for (ai, &x) in pa.iter().enumerate() {
            for &z in pa.iter().skip(ai + 1) {
                if !skeleton.has_edge(x, z) && skeleton.has_edge(x, y) && skeleton.has_edge(z, y)
                {
                    oriented.orient(x, y);
                    oriented.orient(z, y);
                    any = true;
                }
            }
        }
    }
    let _ = any;
    meek_orient(&oriented)
}

/// Result of the two-stage search: the covariate PDAG with the response
/// attached, plus the sepsets found for response edges.
pub struct TwoStageResult {
    pub graph: Pdag,
    pub covariate_sepsets: Sepsets,
    pub response_sepsets: Sepsets,
}

/// Two-stage PC with a response that is assumed to cause nothing.
///
/// Stage A runs plain PC over the covariates only. Stage B attaches the
/// response to every covariate and removes response edges by testing
/// independence given subsets drawn from the covariate's stage-A adjacency
/// united with the response's remaining adjacency. Surviving response edges
/// are oriented covariate -> response; covariate edges keep their stage-A
/// orientation.
///
/// Node convention: covariates are `0..n-1` in `names`, the response is the
/// last node, and the oracle answers over this same indexing.
pub fn pc_two_stage(
    oracle: &dyn CiOracle,
    names: Vec<String>,
    alpha: f64,
    max_depth: usize,
) -> Result<TwoStageResult, PcalgError> {
    let n = names.len();
    assert!(n >= 2, "need at least one covariate plus the response");
    let response = n - 1;
    let cov_names: Vec<String> = names[..response].to_vec();

    // Stage A: covariates only.
    let (cov_skeleton, cov_sepsets) = pc_skeleton(oracle, cov_names, alpha, max_depth)?;
    let cov_pdag = meek_orient(&orient_v_structures(&cov_skeleton, &cov_sepsets));

    // Stage B: response edges only.
    let mut resp_adj: Vec<usize> = (0..response).collect();
    let mut resp_sepsets = Sepsets::new();
    for depth in 0..=max_depth {
        let mut next_adj = resp_adj.clone();
        for &i in &resp_adj {
            if !next_adj.contains(&i) {
                continue;
            }
            let mut pool: Vec<usize> = cov_skeleton.adjacency(i);
            for &r in &next_adj {
                if r != i && !pool.contains(&r) {
                    pool.push(r);
                }
            }
            pool.sort_unstable();
            let found = for_each_subset(&pool, depth, &mut |s: &[usize]| {
                let p = oracle_test(oracle, i, response, s)?;
                if p >= alpha {
                    resp_sepsets.insert(sepset_key(i, response), s.to_vec());
                    Ok(true)
                } else {
                    Ok(false)
                }
            })?;
            if found {
                next_adj.retain(|&x| x != i);
            }
        }
        resp_adj = next_adj;
        if resp_adj.len() <= depth {
            break;
        }
    }

    // Assemble: covariate subgraph plus directed response edges.
    let mut graph = Pdag::empty(names);
    for i in 0..response {
        for j in 0..response {
            if i != j && cov_pdag.mark(i, j) == Mark::Directed {
                graph.orient(i, j);
            } else if i < j && cov_pdag.is_undirected(i, j) {
                graph.set_undirected(i, j);
            }
        }
    }
    graph.v_conflicts = cov_pdag.v_conflicts;
    for &i in &resp_adj {
        graph.orient(i, response);
    }

    Ok(TwoStageResult {
        graph,
        covariate_sepsets: cov_sepsets,
        response_sepsets: resp_sepsets,
    })
}
