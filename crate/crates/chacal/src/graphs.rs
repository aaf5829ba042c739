//! Entity tracking as a computational graph.
//!
//! A tracking task is a sequence of assignments x_i <- f_i(x_0, .., x_{i-1});
//! its dependency structure is a DAG whose longest path length (`depth`)
//! decides how many attention layers a standard transformer needs. Under
//! the receptive-field-1 assumption each layer can only connect directly
//! adjacent nodes, but applying layers doubles the span a node knows about,
//! so `min_layers_for_depth` is the ceiling log₂ bound. The
//! [`simulate_receptive_field`] simulator mechanizes that doubling argument
//! on chains and is checked exhaustively against the formula.

use serde::{Deserialize, Serialize};

/// DAG over variables 0..n, edge (i, j) meaning x_i feeds the computation
/// of x_j. Edges only point forward (i < j), so index order is topological.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComputationGraph {
    n_nodes: usize,
    edges: Vec<(usize, usize)>,
}

/// Construction/validation failures.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GraphError {
    EdgeOutOfRange { edge: (usize, usize), n_nodes: usize },
    EdgeNotForward { edge: (usize, usize) },
}

impl std::fmt::Display for GraphError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GraphError::EdgeOutOfRange { edge, n_nodes } => {
                write!(f, "edge {edge:?} outside node range 0..{n_nodes}")
            }
            GraphError::EdgeNotForward { edge } => {
                write!(f, "edge {edge:?} does not point forward (needs i < j)")
            }
        }
    }
}

impl std::error::Error for GraphError {}

impl ComputationGraph {
    pub fn new(n_nodes: usize, edges: Vec<(usize, usize)>) -> Result<Self, GraphError> {
        for &(i, j) in &edges {
            if i >= n_nodes || j >= n_nodes {
                return Err(GraphError::EdgeOutOfRange { edge: (i, j), n_nodes });
            }
            if i >= j {
                return Err(GraphError::EdgeNotForward { edge: (i, j) });
            }
        }
        Ok(ComputationGraph { n_nodes, edges })
    }

    /// Chain 0 -> 1 -> .. -> n_nodes-1.
    pub fn chain(n_nodes: usize) -> Self {
        let edges = (1..n_nodes).map(|j| (j - 1, j)).collect();
        ComputationGraph { n_nodes, edges }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Length in edges of the longest directed path (0 when edgeless).
    /// Dynamic programming in index order, which is topological.
    pub fn depth(&self) -> usize {
        let mut dist = vec![0usize; self.n_nodes];
        let mut longest = 0;
        // edges sorted by target index would allow one pass; a sweep per
        // node over the edge list is fine at the sizes used here
        let mut by_target: Vec<Vec<usize>> = vec![Vec::new(); self.n_nodes];
        for &(i, j) in &self.edges {
            by_target[j].push(i);
        }
        for j in 0..self.n_nodes {
            for &i in &by_target[j] {
                dist[j] = dist[j].max(dist[i] + 1);
            }
            longest = longest.max(dist[j]);
        }
        longest
    }

    /// Minimum attention layers to resolve this graph under the
    /// receptive-field-1 assumption: ⌈log₂(depth + 1)⌉.
    pub fn l_min(&self) -> u32 {
        min_layers_for_depth(self.depth() as u64)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("graph serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        let g: ComputationGraph = serde_json::from_str(s)?;
        ComputationGraph::new(g.n_nodes, g.edges)
            .map_err(|e| serde::de::Error::custom(e.to_string()))
    }
}

/// ⌈log₂(depth + 1)⌉, exactly, in integer arithmetic.
pub fn min_layers_for_depth(depth: u64) -> u32 {
    let x = depth + 1;
    if x <= 1 {
        0
    } else {
        64 - (x - 1).leading_zeros()
    }
}

/// Mechanized doubling argument on a chain of `chain_depth` edges.
///
/// Every node starts knowing only itself (radius 0 along the chain). One
/// layer lets node i query the first node past its known span, i + r + 1,
/// and absorb that node's span: r <- min(remaining, r + 1 + r'). Applied
/// simultaneously to every node, the radius doubles per layer, so after L
/// layers the head of the chain knows min(chain_depth, 2^L - 1) steps.
/// Returns the head's radius.
pub fn simulate_receptive_field(chain_depth: usize, layers: u32) -> usize {
    let n_nodes = chain_depth + 1;
    let mut radius = vec![0usize; n_nodes];
    for _ in 0..layers {
        let prev = radius.clone();
        for i in 0..n_nodes {
            let reach_limit = chain_depth - i; // cannot know past the chain end
            let probe = i + prev[i] + 1;
            radius[i] = if probe < n_nodes {
                (prev[i] + 1 + prev[probe]).min(reach_limit)
            } else {
                prev[i].min(reach_limit)
            };
        }
    }
    radius[0]
}

/// Smallest layer count whose simulated receptive field covers a chain of
/// the given depth.
pub fn min_layers_by_simulation(chain_depth: usize) -> u32 {
    let mut layers = 0;
    while simulate_receptive_field(chain_depth, layers) < chain_depth {
        layers += 1;
    }
    layers
}

/// Exhaustively confirm that simulated layer counts equal the ceiling-log
/// formula for every chain depth up to `max_depth`. Returns the first
/// disagreeing depth, or None when all agree.
pub fn theorem_counterexample(max_depth: usize) -> Option<usize> {
    (0..=max_depth).find(|&d| min_layers_by_simulation(d) != min_layers_for_depth(d as u64))
}
