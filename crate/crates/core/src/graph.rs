//! Static undirected communication topology.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use crate::error::{Error, Result};

/// Undirected communication graph over `agent_count` agents embedded in
/// `dimension`-dimensional space.
///
/// Edges are stored as unordered pairs, so symmetry holds by construction.
/// Neighbour lists are kept sorted ascending so that every traversal is
/// reproducible.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopologyGraph {
    agent_count: usize,
    dimension: usize,
    edges: BTreeSet<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
}

/// One violated clause of the topology assumption.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    /// The graph splits into more than one component; each listed set is a
    /// component (ascending).
    Disconnected { components: Vec<Vec<usize>> },
    /// Agent has fewer neighbours than the ambient dimension.
    InsufficientDegree { agent: usize, degree: usize, required: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Disconnected { components } => {
                write!(f, "graph is disconnected: components {components:?}")
            }
            Violation::InsufficientDegree { agent, degree, required } => {
                write!(f, "agent {agent} has {degree} neighbour(s), needs at least {required}")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl TopologyGraph {
    /// Builds a graph from an edge list. Pairs are normalised to `(min, max)`
    /// and duplicates collapse. Self-loops and out-of-range endpoints are
    /// rejected.
    pub fn new(agent_count: usize, dimension: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if agent_count == 0 {
            return Err(Error::InvalidGraph("agent_count must be at least 1".into()));
        }
        if dimension == 0 {
            return Err(Error::InvalidGraph("dimension must be at least 1".into()));
        }
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a == b {
                return Err(Error::InvalidGraph(format!("self-loop on agent {a}")));
            }
            for v in [a, b] {
                if v >= agent_count {
                    return Err(Error::AgentOutOfRange { index: v, agent_count });
                }
            }
            set.insert((a.min(b), a.max(b)));
        }
        let mut adjacency = vec![Vec::new(); agent_count];
        for &(a, b) in &set {
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        Ok(Self { agent_count, dimension, edges: set, adjacency })
    }

    /// Cycle `0 - 1 - ... - (n-1) - 0`. For `n = 2` this is a single edge.
    pub fn cycle(agent_count: usize, dimension: usize) -> Result<Self> {
        let edges = (0..agent_count).map(|i| (i, (i + 1) % agent_count)).filter(|(a, b)| a != b);
        Self::new(agent_count, dimension, edges.collect::<Vec<_>>())
    }

    pub fn complete(agent_count: usize, dimension: usize) -> Result<Self> {
        let edges = (0..agent_count).flat_map(|i| ((i + 1)..agent_count).map(move |j| (i, j))).collect::<Vec<_>>();
        Self::new(agent_count, dimension, edges)
    }

    pub fn agent_count(&self) -> usize {
        self.agent_count
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Edges as normalised `(min, max)` pairs in ascending order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    /// Neighbours of agent `i` in ascending index order.
    pub fn neighbors(&self, i: usize) -> Result<&[usize]> {
        self.adjacency
            .get(i)
            .map(Vec::as_slice)
            .ok_or(Error::AgentOutOfRange { index: i, agent_count: self.agent_count })
    }

    /// Infallible variant for indices already known to be in range.
    pub(crate) fn neighbors_of(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    fn components(&self) -> Vec<Vec<usize>> {
        let mut seen = vec![false; self.agent_count];
        let mut out = Vec::new();
        for start in 0..self.agent_count {
            if seen[start] {
                continue;
            }
            let mut comp = Vec::new();
            let mut queue = VecDeque::from([start]);
            seen[start] = true;
            while let Some(v) = queue.pop_front() {
                comp.push(v);
                for &w in &self.adjacency[v] {
                    if !seen[w] {
                        seen[w] = true;
                        queue.push_back(w);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    /// Checks connectivity and the per-agent degree requirement
    /// `|N(i)| >= dimension`. Violations are returned as data.
    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        let components = self.components();
        if components.len() > 1 {
            violations.push(Violation::Disconnected { components });
        }
        for (agent, list) in self.adjacency.iter().enumerate() {
            if list.len() < self.dimension {
                violations.push(Violation::InsufficientDegree { agent, degree: list.len(), required: self.dimension });
            }
        }
        ValidationReport { violations }
    }

    /// Shortest-path hop distance between two agents, `None` if unreachable.
    pub fn hop_distance(&self, from: usize, to: usize) -> Option<usize> {
        let mut dist = vec![usize::MAX; self.agent_count];
        dist[from] = 0;
        let mut queue = VecDeque::from([from]);
        while let Some(v) = queue.pop_front() {
            if v == to {
                return Some(dist[v]);
            }
            for &w in &self.adjacency[v] {
                if dist[w] == usize::MAX {
                    dist[w] = dist[v] + 1;
                    queue.push_back(w);
                }
            }
        }
        None
    }

    /// Applies a relabelling `perm[old] = new`.
    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        Self::new(
            self.agent_count,
            self.dimension,
            self.edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect::<Vec<_>>(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hexagon_cycle_is_valid_in_the_plane() {
        let g = TopologyGraph::cycle(6, 2).unwrap();
        assert!(g.validate().is_valid());
        assert_eq!(g.neighbors(0).unwrap(), &[1, 5]);
    }

    #[test]
    fn path_graph_endpoints_lack_degree() {
        let g = TopologyGraph::new(3, 2, [(0, 1), (1, 2)]).unwrap();
        let report = g.validate();
        assert_eq!(
            report.violations,
            vec![
                Violation::InsufficientDegree { agent: 0, degree: 1, required: 2 },
                Violation::InsufficientDegree { agent: 2, degree: 1, required: 2 },
            ]
        );
    }

    #[test]
    fn two_triangles_are_disconnected() {
        let g = TopologyGraph::new(6, 2, [(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (5, 3)]).unwrap();
        let report = g.validate();
        assert_eq!(report.violations, vec![Violation::Disconnected { components: vec![vec![0, 1, 2], vec![3, 4, 5]] }]);
    }

    #[test]
    fn neighbour_lists() {
        let k4 = TopologyGraph::complete(4, 2).unwrap();
        assert_eq!(k4.neighbors(2).unwrap(), &[0, 1, 3]);
        let single = TopologyGraph::new(2, 1, [(1, 0)]).unwrap();
        assert_eq!(single.neighbors(0).unwrap(), &[1]);
        assert!(matches!(k4.neighbors(4), Err(Error::AgentOutOfRange { index: 4, agent_count: 4 })));
    }

    #[test]
    fn rejects_self_loops_and_bad_indices() {
        assert!(TopologyGraph::new(3, 2, [(1, 1)]).is_err());
        assert!(TopologyGraph::new(3, 2, [(0, 3)]).is_err());
        assert!(TopologyGraph::new(0, 2, []).is_err());
    }

    #[test]
    fn hop_distances_on_cycle() {
        let g = TopologyGraph::cycle(6, 2).unwrap();
        assert_eq!(g.hop_distance(0, 3), Some(3));
        assert_eq!(g.hop_distance(0, 4), Some(2));
    }

    proptest! {
        #[test]
        fn neighbourhood_is_symmetric(
            n in 2usize..12,
            raw in proptest::collection::vec((0usize..12, 0usize..12), 0..40)
        ) {
            let edges: Vec<_> = raw.into_iter()
                .map(|(a, b)| (a % n, b % n))
                .filter(|(a, b)| a != b)
                .collect();
            let g = TopologyGraph::new(n, 2, edges).unwrap();
            for i in 0..n {
                let ni = g.neighbors(i).unwrap();
                prop_assert!(ni.windows(2).all(|w| w[0] < w[1]));
                for &j in ni {
                    prop_assert!(g.neighbors(j).unwrap().contains(&i));
                }
            }
            // a valid planar graph lets every agent form a neighbour pair
            if g.validate().is_valid() {
                for i in 0..n {
                    prop_assert!(g.neighbors(i).unwrap().len() >= 2);
                }
            }
        }
    }
}
