//! Task-specific multi-agent network: agent features, the virtual task node
//! and anchor topologies.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::agents::{encode_agent, validate_agents, AgentSpec, Embedder, EmbeddingVector};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

/// Square 0/1 matrix with an empty diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjacencyMatrix(Matrix);

impl AdjacencyMatrix {
    pub fn empty(n: usize) -> Self {
        Self(Matrix::zeros(n, n))
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut m = Matrix::zeros(n, n);
        for &(i, j) in edges {
            if i >= n || j >= n || i == j {
                return Err(Error::Config(format!("invalid edge ({i}, {j}) for n = {n}")));
            }
            m[(i, j)] = 1.0;
        }
        Ok(Self(m))
    }

    pub fn n(&self) -> usize {
        self.0.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.0[(i, j)] != 0.0
    }

    /// Edges in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.n();
        (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.has_edge(i, j))
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        self.edges().len()
    }

    /// Adds a node at index `n` linked both ways to every existing node.
    pub fn with_task_node(&self) -> AdjacencyMatrix {
        let n = self.n();
        let mut m = Matrix::zeros(n + 1, n + 1);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = self.0[(i, j)];
            }
            m[(i, n)] = 1.0;
            m[(n, i)] = 1.0;
        }
        AdjacencyMatrix(m)
    }

    pub fn without_last_node(&self) -> AdjacencyMatrix {
        AdjacencyMatrix(self.0.leading_block(self.n() - 1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorKind {
    Chain,
    Star,
    Tree,
    Complete,
    Random,
}

impl AnchorKind {
    pub const ALL: [AnchorKind; 5] = [
        AnchorKind::Chain,
        AnchorKind::Star,
        AnchorKind::Tree,
        AnchorKind::Complete,
        AnchorKind::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AnchorKind::Chain => "chain",
            AnchorKind::Star => "star",
            AnchorKind::Tree => "tree",
            AnchorKind::Complete => "complete",
            AnchorKind::Random => "random",
        }
    }
}

impl fmt::Display for AnchorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AnchorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AnchorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown topology kind '{s}'")))
    }
}

/// Random anchors include each ordered pair with this probability.
pub const RANDOM_EDGE_PROBABILITY: f64 = 0.5;

pub fn make_anchor(kind: AnchorKind, n: usize, rng: &mut Rng) -> Result<AdjacencyMatrix> {
    if n == 0 {
        return Err(Error::Config("anchor needs at least one node".into()));
    }
    let mut edges = Vec::new();
    match kind {
        AnchorKind::Chain => edges.extend((1..n).map(|i| (i - 1, i))),
        AnchorKind::Star => edges.extend((1..n).map(|j| (0, j))),
        AnchorKind::Tree => {
            for i in 0..n {
                for child in [2 * i + 1, 2 * i + 2] {
                    if child < n {
                        edges.push((i, child));
                    }
                }
            }
        }
        AnchorKind::Complete => {
            for i in 0..n {
                edges.extend((0..n).filter(|&j| j != i).map(|j| (i, j)));
            }
        }
        AnchorKind::Random => {
            for i in 0..n {
                for j in 0..n {
                    if i != j && rng.bernoulli(RANDOM_EDGE_PROBABILITY) {
                        edges.push((i, j));
                    }
                }
            }
        }
    }
    AdjacencyMatrix::from_edges(n, &edges)
}

/// Agent features, task embedding and (augmented) anchor for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskGraph {
    pub agent_features: Matrix,
    pub task_feature: EmbeddingVector,
    pub anchor: AdjacencyMatrix,
    pub augmented_anchor: AdjacencyMatrix,
}

impl TaskGraph {
    pub fn n_agents(&self) -> usize {
        self.agent_features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.agent_features.cols()
    }

    /// Agent rows followed by the task row.
    pub fn node_features(&self) -> Matrix {
        let n = self.n_agents();
        let d = self.feature_dim();
        Matrix::from_fn(n + 1, d, |i, j| {
            if i < n {
                self.agent_features[(i, j)]
            } else {
                self.task_feature.values()[j]
            }
        })
    }
}

pub fn build_task_graph(
    agents: &[AgentSpec],
    query: &str,
    anchor_kind: AnchorKind,
    provider: &dyn Embedder,
    rng: &mut Rng,
) -> Result<TaskGraph> {
    let anchor = make_anchor(anchor_kind, agents.len(), rng)?;
    build_task_graph_with_anchor(agents, query, anchor, provider)
}

pub fn build_task_graph_with_anchor(
    agents: &[AgentSpec],
    query: &str,
    anchor: AdjacencyMatrix,
    provider: &dyn Embedder,
) -> Result<TaskGraph> {
    validate_agents(agents)?;
    if anchor.n() != agents.len() {
        return Err(Error::Config(format!(
            "anchor has {} nodes for {} agents",
            anchor.n(),
            agents.len()
        )));
    }
    let d = provider.dim();
    let mut agent_features = Matrix::zeros(agents.len(), d);
    for (i, agent) in agents.iter().enumerate() {
        let x = encode_agent(agent, provider)?;
        check_dim(&x, d)?;
        agent_features.row_mut(i).copy_from_slice(x.values());
    }
    let task_feature = provider.embed(query)?;
    check_dim(&task_feature, d)?;
    let augmented_anchor = anchor.with_task_node();
    Ok(TaskGraph {
        agent_features,
        task_feature,
        anchor,
        augmented_anchor,
    })
}

fn check_dim(v: &EmbeddingVector, d: usize) -> Result<()> {
    if v.dim() != d {
        return Err(Error::Config(format!(
            "embedding has dimension {}, provider declares {d}",
            v.dim()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::HashEmbedder;

    fn agents(n: usize) -> Vec<AgentSpec> {
        (0..n).map(|i| AgentSpec::new(i, "mock", format!("Role {i}"))).collect()
    }

    #[test]
    fn anchor_definitions() {
        let mut rng = Rng::new(0);
        let chain = make_anchor(AnchorKind::Chain, 3, &mut rng).unwrap();
        assert_eq!(chain.edges(), vec![(0, 1), (1, 2)]);
        let complete = make_anchor(AnchorKind::Complete, 2, &mut rng).unwrap();
        assert_eq!(complete.edges(), vec![(0, 1), (1, 0)]);
        let star = make_anchor(AnchorKind::Star, 4, &mut rng).unwrap();
        assert_eq!(star.edges(), vec![(0, 1), (0, 2), (0, 3)]);
        let tree = make_anchor(AnchorKind::Tree, 5, &mut rng).unwrap();
        assert_eq!(tree.edges(), vec![(0, 1), (0, 2), (1, 3), (1, 4)]);
        assert!(make_anchor(AnchorKind::Chain, 0, &mut rng).is_err());
        assert!("ring".parse::<AnchorKind>().is_err());
        assert_eq!("tree".parse::<AnchorKind>().unwrap(), AnchorKind::Tree);
    }

    #[test]
    fn task_node_augmentation() {
        let e = HashEmbedder::new(16).unwrap();
        let mut rng = Rng::new(0);
        let g = build_task_graph(&agents(2), "compute 3+4", AnchorKind::Chain, &e, &mut rng).unwrap();
        assert_eq!(g.augmented_anchor.edges(), vec![(0, 1), (0, 2), (1, 2), (2, 0), (2, 1)]);
        assert_eq!(g.augmented_anchor.without_last_node(), g.anchor);

        let g1 = build_task_graph(&agents(1), "q", AnchorKind::Chain, &e, &mut rng).unwrap();
        assert_eq!(g1.augmented_anchor.edges(), vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn graph_construction_is_deterministic() {
        let e = HashEmbedder::default();
        let a = build_task_graph(&agents(4), "q", AnchorKind::Chain, &e, &mut Rng::new(1)).unwrap();
        let b = build_task_graph(&agents(4), "q", AnchorKind::Chain, &e, &mut Rng::new(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.node_features().rows(), 5);
        assert_eq!(a.node_features().row(4), a.task_feature.values());
    }

    struct Liar;
    impl Embedder for Liar {
        fn dim(&self) -> usize {
            8
        }
        fn embed(&self, _text: &str) -> Result<EmbeddingVector> {
            EmbeddingVector::normalized(vec![1.0; 4])
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let err = build_task_graph(&agents(2), "q", AnchorKind::Chain, &Liar, &mut Rng::new(0));
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
