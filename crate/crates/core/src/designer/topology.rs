use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::AdjacencyMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub weight: f64,
}

/// Directed acyclic communication graph over `n` agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommTopology {
    pub n: usize,
    pub edges: Vec<Edge>,
}

impl CommTopology {
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            edges: Vec::new(),
        }
    }

    /// Builds a topology from candidate edges, breaking any cycles.
    /// Edges are kept sorted by `(from, to)`.
    pub fn from_candidates(n: usize, candidates: Vec<Edge>) -> Result<Self> {
        let mut seen = vec![false; n * n];
        for e in &candidates {
            if e.from >= n || e.to >= n || e.from == e.to {
                return Err(Error::Config(format!(
                    "invalid edge ({}, {}) for {n} agents",
                    e.from, e.to
                )));
            }
            if seen[e.from * n + e.to] {
                return Err(Error::Config(format!("duplicate edge ({}, {})", e.from, e.to)));
            }
            seen[e.from * n + e.to] = true;
        }
        let mut edges = break_cycles(n, candidates);
        edges.sort_by_key(|e| (e.from, e.to));
        Ok(Self { n, edges })
    }

    /// Unit-weight edges of an adjacency matrix, cycle-broken.
    pub fn from_adjacency(adj: &AdjacencyMatrix) -> Self {
        let candidates = adj
            .edges()
            .into_iter()
            .map(|(from, to)| Edge {
                from,
                to,
                weight: 1.0,
            })
            .collect();
        Self::from_candidates(adj.n(), candidates).expect("adjacency edges are valid")
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.edges.iter().any(|e| e.from == from && e.to == to)
    }

    pub fn in_neighbors(&self, node: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter(|e| e.to == node)
            .map(|e| e.from)
            .collect()
    }

    pub fn out_degree(&self, node: usize) -> usize {
        self.edges.iter().filter(|e| e.from == node).count()
    }

    pub fn is_acyclic(&self) -> bool {
        find_cycle(self.n, &self.edges).is_none()
    }
}

/// Returns the edge indices of some directed cycle, searching from the
/// lowest node index and following neighbors in edge order.
pub(crate) fn find_cycle(n: usize, edges: &[Edge]) -> Option<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (k, e) in edges.iter().enumerate() {
        out[e.from].push(k);
    }
    for list in &mut out {
        list.sort_by_key(|&k| edges[k].to);
    }
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut color = vec![0u8; n];
    let mut path: Vec<usize> = Vec::new();
    for root in 0..n {
        if color[root] != 0 {
            continue;
        }
        let mut stack: Vec<(usize, usize)> = vec![(root, 0)];
        color[root] = 1;
        while let Some(&mut (node, ref mut next)) = stack.last_mut() {
            if *next < out[node].len() {
                let k = out[node][*next];
                *next += 1;
                let to = edges[k].to;
                match color[to] {
                    0 => {
                        color[to] = 1;
                        path.push(k);
                        stack.push((to, 0));
                    }
                    1 => {
                        let start = path
                            .iter()
                            .position(|&p| edges[p].from == to)
                            .unwrap_or(path.len());
                        let mut cycle = path[start..].to_vec();
                        cycle.push(k);
                        return Some(cycle);
                    }
                    _ => {}
                }
            } else {
                color[node] = 2;
                stack.pop();
                path.pop();
            }
        }
    }
    None
}

/// Repeatedly removes the lightest edge of some cycle until none remain.
/// Weight ties go to the edge with the larger `from`, then the larger `to`.
pub fn break_cycles(n: usize, mut edges: Vec<Edge>) -> Vec<Edge> {
    while let Some(cycle) = find_cycle(n, &edges) {
        let victim = cycle
            .into_iter()
            .min_by(|&a, &b| {
                let (ea, eb) = (&edges[a], &edges[b]);
                ea.weight
                    .total_cmp(&eb.weight)
                    .then(eb.from.cmp(&ea.from))
                    .then(eb.to.cmp(&ea.to))
            })
            .expect("cycles are non-empty");
        edges.remove(victim);
    }
    edges
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(from: usize, to: usize, weight: f64) -> Edge {
        Edge { from, to, weight }
    }

    #[test]
    fn two_cycle_loses_lighter_edge() {
        let t = CommTopology::from_candidates(2, vec![e(0, 1, 0.9), e(1, 0, 0.6)]).unwrap();
        assert_eq!(t.edges, vec![e(0, 1, 0.9)]);
    }

    #[test]
    fn complete_graph_with_equal_weights_keeps_forward_edges() {
        let n = 5;
        let mut c = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    c.push(e(i, j, 1.0));
                }
            }
        }
        let t = CommTopology::from_candidates(n, c).unwrap();
        assert_eq!(t.edge_count(), 10);
        assert!(t.edges.iter().all(|x| x.from < x.to));
    }

    #[test]
    fn rejects_bad_edges() {
        assert!(CommTopology::from_candidates(2, vec![e(0, 0, 1.0)]).is_err());
        assert!(CommTopology::from_candidates(2, vec![e(0, 2, 1.0)]).is_err());
        assert!(CommTopology::from_candidates(2, vec![e(0, 1, 1.0), e(0, 1, 0.5)]).is_err());
    }

    #[test]
    fn finds_long_cycles() {
        let edges = vec![e(0, 1, 1.0), e(1, 2, 0.7), e(2, 3, 1.0), e(3, 1, 0.8)];
        let cyc = find_cycle(4, &edges).unwrap();
        assert_eq!(cyc.len(), 3);
        let kept = break_cycles(4, edges);
        assert_eq!(kept.len(), 3);
        assert!(!kept.iter().any(|x| x.from == 1 && x.to == 2));
    }
}
