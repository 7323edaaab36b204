//! Directed acyclic graphs, exact d-separation, and structural Hamming
//! distance against a CPDAG.

use std::collections::HashSet;

use rand::Rng;

use crate::pcalg::{cpdag_from_parents, CiOracle, Mark, Pdag};
use crate::seed::stream_rng;

/// A DAG stored as per-node sorted parent lists.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Dag {
    names: Vec<String>,
    parents: Vec<Vec<usize>>,
}

impl Dag {
    /// Build from parent lists; panics on cycles or out-of-range parents.
    pub fn new(names: Vec<String>, mut parents: Vec<Vec<usize>>) -> Self {
        assert_eq!(names.len(), parents.len());
        for p in &mut parents {
            p.sort_unstable();
            p.dedup();
        }
        let dag = Self { names, parents };
        assert!(dag.topological_order().is_some(), "graph has a cycle");
        dag
    }

    pub fn n_nodes(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn parents(&self, i: usize) -> &[usize] {
        &self.parents[i]
    }

    pub fn parent_lists(&self) -> &[Vec<usize>] {
        &self.parents
    }

    pub fn children(&self, i: usize) -> Vec<usize> {
        (0..self.n_nodes())
            .filter(|&c| self.parents[c].contains(&i))
            .collect()
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.parents[to].contains(&from)
    }

    pub fn n_edges(&self) -> usize {
        self.parents.iter().map(|p| p.len()).sum()
    }

    /// Kahn's algorithm; `None` on a cycle.
    pub fn topological_order(&self) -> Option<Vec<usize>> {
        let n = self.n_nodes();
        let mut indeg: Vec<usize> = self.parents.iter().map(|p| p.len()).collect();
        let mut ready: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop() {
            order.push(i);
            for c in self.children(i) {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    ready.push(c);
                }
            }
        }
        (order.len() == n).then_some(order)
    }

    /// Ancestors of a set, including the set itself.
    fn ancestral_closure(&self, seed_nodes: &[usize]) -> HashSet<usize> {
        let mut closed: HashSet<usize> = HashSet::new();
        let mut stack: Vec<usize> = seed_nodes.to_vec();
        while let Some(i) = stack.pop() {
            if closed.insert(i) {
                stack.extend(self.parents[i].iter().copied());
            }
        }
        closed
    }

    /// Exact d-separation of `x` and `y` given `z`, by reachability in the
    /// moralized ancestral graph: keep ancestors of `{x, y} ∪ z`, marry all
    /// parent pairs, drop directions, delete `z`, and test connectivity.
    pub fn d_separated(&self, x: usize, y: usize, z: &[usize]) -> bool {
        if x == y {
            return false;
        }
        let mut seed_nodes = vec![x, y];
        seed_nodes.extend_from_slice(z);
        let keep = self.ancestral_closure(&seed_nodes);

        let n = self.n_nodes();
        let mut adj = vec![HashSet::<usize>::new(); n];
        let connect = |a: usize, b: usize, adj: &mut Vec<HashSet<usize>>| {
            adj[a].insert(b);
            adj[b].insert(a);
        };
        for &node in &keep {
            let pa: Vec<usize> = self.parents[node]
                .iter()
                .copied()
                .filter(|p| keep.contains(p))
                .collect();
            for &p in &pa {
                connect(p, node, &mut adj);
            }
            // marry parents
            for (ai, &a) in pa.iter().enumerate() {
                for &b in pa.iter().skip(ai + 1) {
                    connect(a, b, &mut adj);
                }
            }
        }

        let blocked: HashSet<usize> = z.iter().copied().collect();
        if blocked.contains(&x) || blocked.contains(&y) {
            return true;
        }
        let mut visited = HashSet::new();
        let mut stack = vec![x];
        while let Some(node) = stack.pop() {
            if node == y {
                return false;
            }
            if !visited.insert(node) {
                continue;
            }
            for &next in &adj[node] {
                if !blocked.contains(&next) && !visited.contains(&next) {
                    stack.push(next);
                }
            }
        }
        true
    }

    /// The CPDAG of this DAG.
    pub fn cpdag(&self) -> Pdag {
        cpdag_from_parents(self.names.clone(), &self.parents)
    }
}

/// Sample a DAG: draw a uniform topological order, then include each
/// forward edge independently with probability `edge_prob`.
pub fn random_dag(n_vars: usize, edge_prob: f64, seed: u64) -> Dag {
    assert!(n_vars >= 1);
    assert!((0.0..=1.0).contains(&edge_prob));
    let mut rng = stream_rng(seed, "random-dag", 0);
    let mut order: Vec<usize> = (0..n_vars).collect();
    for i in (1..n_vars).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut parents = vec![Vec::new(); n_vars];
    for a in 0..n_vars {
        for b in (a + 1)..n_vars {
            if rng.random::<f64>() < edge_prob {
                parents[order[b]].push(order[a]);
            }
        }
    }
    let names = (0..n_vars).map(|i| format!("v{i}")).collect();
    Dag::new(names, parents)
}

/// Oracle answering from exact d-separation: p = 1 when separated
/// (independent), p = 0 otherwise.
pub struct DsepOracle {
    dag: Dag,
}

impl DsepOracle {
    pub fn new(dag: Dag) -> Self {
        Self { dag }
    }

    pub fn dag(&self) -> &Dag {
        &self.dag
    }
}

impl CiOracle for DsepOracle {
    fn p_value(&self, i: usize, j: usize, s: &[usize]) -> Result<f64, String> {
        Ok(if self.dag.d_separated(i, j, s) { 1.0 } else { 0.0 })
    }
}

/// Structural Hamming distance between an estimated PDAG and the CPDAG of
/// the true DAG: each pair whose mark differs (missing vs present, undirected
/// vs directed, or reversed) costs 1.
pub fn shd(estimate: &Pdag, truth: &Dag) -> Result<usize, String> {
    if estimate.names() != truth.names() {
        return Err(format!(
            "node sets differ: {:?} vs {:?}",
            estimate.names(),
            truth.names()
        ));
    }
    let cpdag = truth.cpdag();
    let n = truth.n_nodes();
    let mut distance = 0;
    for i in 0..n {
        for j in (i + 1)..n {
            let a = (estimate.mark(i, j), estimate.mark(j, i));
            let b = (cpdag.mark(i, j), cpdag.mark(j, i));
            if a != b {
                distance += 1;
            }
        }
    }
    let _ = Mark::None; // marks compared pairwise above
    Ok(distance)
}
