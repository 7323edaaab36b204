//! Partially directed acyclic graph with undirected/directed edge marks.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use super::PcalgError;

/// Mark of the ordered pair `(i, j)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mark {
    None,
    Undirected,
    /// Tail at `i`, head at `j`: the edge `i -> j`.
    Directed,
}

/// Separating sets recorded during skeleton discovery, keyed by the
/// unordered node pair.
pub type Sepsets = HashMap<(usize, usize), Vec<usize>>;

pub fn sepset_key(i: usize, j: usize) -> (usize, usize) {
    (i.min(j), i.max(j))
}

/// A graph over named nodes whose edges are undirected or directed.
/// Symmetric consistency (`i -> j` excludes `j -> i` and `i -- j`) is
/// maintained by the mutators.
#[derive(Debug, Clone, PartialEq)]
pub struct Pdag {
    names: Vec<String>,
    /// Row-major `n x n`; `marks[i*n + j]` is the mark of `(i, j)`.
    marks: Vec<Mark>,
    /// Edges left undirected because v-structure orientation demanded both
    /// directions.
    pub v_conflicts: usize,
}

impl Pdag {
    pub fn empty(names: Vec<String>) -> Self {
        let n = names.len();
        Self {
            names,
            marks: vec![Mark::None; n * n],
            v_conflicts: 0,
        }
    }

    pub fn complete_undirected(names: Vec<String>) -> Self {
        let mut g = Self::empty(names);
        for i in 0..g.n_nodes() {
            for j in (i + 1)..g.n_nodes() {
                g.set_undirected(i, j);
            }
        }
        g
    }

    pub fn n_nodes(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn mark(&self, i: usize, j: usize) -> Mark {
        self.marks[i * self.n_nodes() + j]
    }

    fn set_mark(&mut self, i: usize, j: usize, m: Mark) {
        let n = self.n_nodes();
        self.marks[i * n + j] = m;
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.mark(i, j) != Mark::None || self.mark(j, i) != Mark::None
    }

    pub fn is_undirected(&self, i: usize, j: usize) -> bool {
        self.mark(i, j) == Mark::Undirected
    }

    /// True when the edge `i -> j` is present.
    pub fn is_directed(&self, i: usize, j: usize) -> bool {
        self.mark(i, j) == Mark::Directed
    }

    pub fn set_undirected(&mut self, i: usize, j: usize) {
        assert_ne!(i, j);
        self.set_mark(i, j, Mark::Undirected);
        self.set_mark(j, i, Mark::Undirected);
    }

    /// Orient `i -> j`, replacing whatever mark the pair had.
    pub fn orient(&mut self, i: usize, j: usize) {
        assert_ne!(i, j);
        self.set_mark(i, j, Mark::Directed);
        self.set_mark(j, i, Mark::None);
    }

    pub fn remove_edge(&mut self, i: usize, j: usize) {
        self.set_mark(i, j, Mark::None);
        self.set_mark(j, i, Mark::None);
    }

    /// Nodes adjacent to `i` by any edge, ascending.
    pub fn adjacency(&self, i: usize) -> Vec<usize> {
        (0..self.n_nodes())
            .filter(|&j| j != i && self.has_edge(i, j))
            .collect()
    }

    /// Nodes `p` with `p -> i`.
    pub fn parents(&self, i: usize) -> Vec<usize> {
        (0..self.n_nodes())
            .filter(|&p| self.is_directed(p, i))
            .collect()
    }

    /// Nodes `c` with `i -> c`.
    pub fn children(&self, i: usize) -> Vec<usize> {
        (0..self.n_nodes())
            .filter(|&c| self.is_directed(i, c))
            .collect()
    }

    pub fn undirected_neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.n_nodes())
            .filter(|&j| self.is_undirected(i, j))
            .collect()
    }

    pub fn n_edges(&self) -> usize {
        let mut count = 0;
        for i in 0..self.n_nodes() {
            for j in (i + 1)..self.n_nodes() {
                if self.has_edge(i, j) {
                    count += 1;
                }
            }
        }
        count
    }

    /// Cycle check over the directed part only.
    pub fn has_directed_cycle(&self) -> bool {
        let n = self.n_nodes();
        // Kahn's algorithm
        let mut indeg = vec![0usize; n];
        for i in 0..n {
            for j in 0..n {
                if i != j && self.is_directed(i, j) {
                    indeg[j] += 1;
                }
            }
        }
        let mut queue: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut seen = 0;
        while let Some(i) = queue.pop() {
            seen += 1;
            for j in self.children(i) {
                indeg[j] -= 1;
                if indeg[j] == 0 {
                    queue.push(j);
                }
            }
        }
        seen != n
    }

    /// Edge-list text format, one line per edge: `src dst mark` with mark
    /// `--` (undirected, smaller index first) or `->`.
    pub fn write_edge_list<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for i in 0..self.n_nodes() {
            for j in 0..self.n_nodes() {
                match self.mark(i, j) {
                    Mark::Directed => {
                        writeln!(w, "{} {} ->", self.names[i], self.names[j])?;
                    }
                    Mark::Undirected if i < j => {
                        writeln!(w, "{} {} --", self.names[i], self.names[j])?;
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    pub fn read_edge_list<R: BufRead>(names: Vec<String>, r: R) -> Result<Self, PcalgError> {
        let index: HashMap<&str, usize> = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        let find = |name: &str| -> Result<usize, PcalgError> {
            index
                .get(name)
                .copied()
                .ok_or_else(|| PcalgError::Parse(format!("unknown node `{name}`")))
        };
        let mut edges = Vec::new();
        for line in r.lines() {
            let line = line.map_err(|e| PcalgError::Parse(e.to_string()))?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(PcalgError::Parse(format!("bad edge line `{line}`")));
            }
            edges.push((find(parts[0])?, find(parts[1])?, parts[2].to_string()));
        }
        let mut g = Self::empty(names);
        for (src, dst, mark) in edges {
            match mark.as_str() {
                "--" => g.set_undirected(src, dst),
                "->" => g.orient(src, dst),
                other => return Err(PcalgError::Parse(format!("bad mark `{other}`"))),
            }
        }
        Ok(g)
    }

    /// Identical node set, identical marks.
    pub fn same_graph(&self, other: &Pdag) -> bool {
        self.names == other.names && self.marks == other.marks
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("v{i}")).collect()
    }

    #[test]
    fn marks_stay_symmetric_consistent() {
        let mut g = Pdag::empty(names(3));
        g.set_undirected(0, 1);
        assert!(g.is_undirected(1, 0));
        g.orient(0, 1);
        assert!(g.is_directed(0, 1));
        assert!(!g.is_directed(1, 0));
        assert!(!g.is_undirected(0, 1));
        assert!(g.has_edge(1, 0));
        g.remove_edge(1, 0);
        assert!(!g.has_edge(0, 1));
    }

    #[test]
    fn cycle_detection() {
        let mut g = Pdag::empty(names(3));
        g.orient(0, 1);
        g.orient(1, 2);
        assert!(!g.has_directed_cycle());
        g.orient(2, 0);
        assert!(g.has_directed_cycle());
    }

    #[test]
    fn edge_list_roundtrip() {
        let mut g = Pdag::empty(names(4));
        g.orient(0, 1);
        g.set_undirected(2, 3);
        g.set_undirected(1, 3);
        let mut buf = Vec::new();
        g.write_edge_list(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains("v0 v1 ->"));
        assert!(text.contains("v2 v3 --"));
        let back = Pdag::read_edge_list(names(4), std::io::Cursor::new(&buf)).unwrap();
        assert!(back.same_graph(&g));
    }
}
