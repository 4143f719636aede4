//! Undirected communication graphs.
//!
//! Nodes are `0..n`. Neighbor lists are kept sorted ascending so that every
//! sum over neighbors runs in the same order on every run.

use std::collections::{BTreeSet, VecDeque};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    neighbors: Vec<Vec<usize>>,
}

impl Graph {
    /// Builds a graph from raw adjacency lists and validates it.
    pub fn from_adjacency(mut neighbors: Vec<Vec<usize>>) -> Result<Self> {
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        let g = Graph { neighbors };
        g.validate()?;
        Ok(g)
    }

    /// Same as [`Graph::from_adjacency`] but skips validation.
    pub fn from_adjacency_unchecked(mut neighbors: Vec<Vec<usize>>) -> Self {
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        Graph { neighbors }
    }

    pub fn complete(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidTopology(format!(
                "complete graph needs at least 2 nodes, got {n}"
            )));
        }
        let neighbors = (0..n)
            .map(|i| (0..n).filter(|&j| j != i).collect())
            .collect();
        Ok(Graph { neighbors })
    }

    pub fn ring(n: usize) -> Result<Self> {
        if n < 3 {
            return Err(Error::InvalidTopology(format!("ring needs at least 3 nodes, got {n}")));
        }
        let neighbors = (0..n)
            .map(|i| {
                let mut v = vec![(i + n - 1) % n, (i + 1) % n];
                v.sort_unstable();
                v
            })
            .collect();
        Ok(Graph { neighbors })
    }

    /// Parses an edge list: one `i j` pair per line, 0-based. Blank lines and
    /// lines starting with `#` are skipped. Duplicate and reversed pairs
    /// collapse to a single undirected edge.
    pub fn parse_edge_list(text: &str, node_count: Option<usize>) -> Result<Self> {
        let mut edges = BTreeSet::new();
        let mut max_index = 0usize;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse = |tok: Option<&str>| -> Result<usize> {
                tok.ok_or_else(|| Error::Parse {
                    line: lineno + 1,
                    message: "expected two node indices".into(),
                })?
                .parse()
                .map_err(|e| Error::Parse { line: lineno + 1, message: format!("{e}") })
            };
            let mut toks = line.split_whitespace();
            let a = parse(toks.next())?;
            let b = parse(toks.next())?;
            if toks.next().is_some() {
                return Err(Error::Parse {
                    line: lineno + 1,
                    message: "expected exactly two node indices".into(),
                });
            }
            if a == b {
                return Err(Error::SelfLoop(a));
            }
            max_index = max_index.max(a).max(b);
            edges.insert((a.min(b), a.max(b)));
        }
        let n = node_count.unwrap_or(max_index + 1);
        if max_index >= n {
            return Err(Error::InvalidTopology(format!(
                "edge references node {max_index} but graph has {n} nodes"
            )));
        }
        let mut neighbors = vec![Vec::new(); n];
        for (a, b) in edges {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        Self::from_adjacency(neighbors)
    }

    pub fn load_edge_list(path: &Path, node_count: Option<usize>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_edge_list(&text, node_count)
    }

    pub fn node_count(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn max_degree(&self) -> usize {
        self.neighbors.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Checks symmetry, absence of self-loops, and connectivity, in that order.
    pub fn validate(&self) -> Result<()> {
        let n = self.node_count();
        if n == 0 {
            return Err(Error::InvalidTopology("graph has no nodes".into()));
        }
        for (i, list) in self.neighbors.iter().enumerate() {
            for &j in list {
                if j >= n {
                    return Err(Error::InvalidTopology(format!(
                        "node {i} lists out-of-range neighbor {j}"
                    )));
                }
                if j == i {
                    return Err(Error::SelfLoop(i));
                }
                if self.neighbors[j].binary_search(&i).is_err() {
                    return Err(Error::Asymmetry { from: i, to: j });
                }
            }
        }
        let components = self.component_count();
        if components != 1 {
            return Err(Error::Disconnected { components });
        }
        Ok(())
    }

    fn component_count(&self) -> usize {
        let n = self.node_count();
        let mut seen = vec![false; n];
        let mut components = 0;
        for start in 0..n {
            if seen[start] {
                continue;
            }
            components += 1;
            seen[start] = true;
            let mut queue = VecDeque::from([start]);
            while let Some(u) = queue.pop_front() {
                for &v in &self.neighbors[u] {
                    if !seen[v] {
                        seen[v] = true;
                        queue.push_back(v);
                    }
                }
            }
        }
        components
    }

    /// Hop distances from `source` by breadth-first search.
    pub fn distances_from(&self, source: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.node_count()];
        dist[source] = Some(0);
        let mut queue = VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].unwrap_or(0);
            for &v in &self.neighbors[u] {
                if dist[v].is_none() {
                    dist[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// Longest shortest path; `None` if disconnected.
    pub fn diameter(&self) -> Option<usize> {
        (0..self.node_count())
            .map(|s| self.distances_from(s).into_iter().collect::<Option<Vec<_>>>())
            .try_fold(0, |acc, d| d.map(|d| acc.max(d.into_iter().max().unwrap_or(0))))
    }
}
