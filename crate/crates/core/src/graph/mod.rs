//! Attributed graphs, TU-format ingestion and biased splits.

mod split;
mod tu;

pub use split::{
    biased_split, threshold_for_count, Comparator, Criterion, PartitionStats, Split, SplitManifest,
    SplitSpec, SplitStats,
};
pub use tu::{parse_tu_dataset, write_tu_dataset};

use serde::{Deserialize, Serialize};

use crate::diff::Matrix;

/// One undirected, attributed, labeled graph.
///
/// Edges are stored once per unordered pair as `(lo, hi)` with `lo < hi`,
/// sorted, with self loops removed.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub id: usize,
    pub node_count: usize,
    pub edges: Vec<(usize, usize)>,
    /// `node_count × d`; `d == 0` when the dataset ships no node data.
    pub features: Matrix,
    pub label: usize,
}

impl Graph {
    /// Build a graph from arbitrary edge pairs, canonicalizing them.
    ///
    /// Panics if an endpoint is out of range or the feature row count is
    /// not `node_count`.
    pub fn new(
        id: usize,
        node_count: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        features: Matrix,
        label: usize,
    ) -> Self {
        assert!(node_count >= 1, "graph must have at least one node");
        assert_eq!(features.rows(), node_count, "feature rows != node count");
        let mut canon: Vec<(usize, usize)> = edges
            .into_iter()
            .inspect(|&(a, b)| assert!(a < node_count && b < node_count, "edge endpoint out of range"))
            .filter(|(a, b)| a != b)
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        canon.sort_unstable();
        canon.dedup();
        Self {
            id,
            node_count,
            edges: canon,
            features,
            label,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.node_count];
        for &(a, b) in &self.edges {
            deg[a] += 1;
            deg[b] += 1;
        }
        deg
    }

    /// 0/1 adjacency matrix, materialized on demand.
    pub fn adjacency(&self) -> Matrix {
        let mut a = Matrix::zeros(self.node_count, self.node_count);
        for &(i, j) in &self.edges {
            a[(i, j)] = 1.0;
            a[(j, i)] = 1.0;
        }
        a
    }

    pub fn stats(&self) -> GraphStats {
        compute_graph_stats(self)
    }

    /// Relabel nodes so that old node `v` becomes `perm[v]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.node_count);
        let mut features = Matrix::zeros(self.node_count, self.feature_dim());
        for (old, &new) in perm.iter().enumerate() {
            features.row_mut(new).copy_from_slice(self.features.row(old));
        }
        Graph::new(
            self.id,
            self.node_count,
            self.edges.iter().map(|&(a, b)| (perm[a], perm[b])),
            features,
            self.label,
        )
    }
}

/// A parsed dataset: graphs plus the original graph-label values.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub graphs: Vec<Graph>,
    pub feature_dim: usize,
    /// `original_labels[k]` is the file label mapped to internal class `k`.
    pub original_labels: Vec<i64>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.original_labels.len()
    }

    /// Replace empty feature matrices with degree features (d = 2).
    pub fn ensure_features(&mut self) {
        if self.feature_dim == 0 {
            for g in &mut self.graphs {
                *g = synthesize_degree_features(g);
            }
            self.feature_dim = 2;
        }
    }
}

/// Per-node `[1, ln(1 + deg) / ln(1 + max_deg)]`, or `[1, 0]` when the
/// graph has no edges.
pub fn synthesize_degree_features(graph: &Graph) -> Graph {
    let deg = graph.degrees();
    let max_deg = deg.iter().copied().max().unwrap_or(0);
    let denom = (1.0 + max_deg as f64).ln();
    let mut features = Matrix::zeros(graph.node_count, 2);
    for (v, &d) in deg.iter().enumerate() {
        features[(v, 0)] = 1.0;
        features[(v, 1)] = if max_deg == 0 {
            0.0
        } else {
            (1.0 + d as f64).ln() / denom
        };
    }
    Graph {
        features,
        ..graph.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub nodes: usize,
    /// Each undirected edge counted in both directions.
    pub edges_directed: usize,
    /// `edges_directed / nodes`, i.e. the average degree.
    pub density: f64,
}

pub fn compute_graph_stats(graph: &Graph) -> GraphStats {
    let edges_directed = 2 * graph.edge_count();
    GraphStats {
        nodes: graph.node_count,
        edges_directed,
        density: edges_directed as f64 / graph.node_count as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bare(n: usize, edges: &[(usize, usize)]) -> Graph {
        Graph::new(0, n, edges.iter().copied(), Matrix::zeros(n, 0), 0)
    }

    #[test]
    fn canonicalizes_edges() {
        let g = bare(3, &[(1, 0), (0, 1), (2, 2), (2, 1)]);
        assert_eq!(g.edges, vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn degree_features_isolated_node() {
        let g = synthesize_degree_features(&bare(1, &[]));
        assert_eq!(g.features.row(0), &[1.0, 0.0]);
    }

    #[test]
    fn degree_features_star() {
        let g = synthesize_degree_features(&bare(4, &[(0, 1), (0, 2), (0, 3)]));
        assert_eq!(g.features.row(0), &[1.0, 1.0]);
        let leaf = g.features.row(2)[1];
        assert!((leaf - 2f64.ln() / 4f64.ln()).abs() < 1e-15);
        assert!((leaf - 0.5).abs() < 1e-15);
    }

    #[test]
    fn degree_features_triangle() {
        let g = synthesize_degree_features(&bare(3, &[(0, 1), (1, 2), (0, 2)]));
        for v in 0..3 {
            assert_eq!(g.features.row(v), &[1.0, 1.0]);
        }
    }

    #[test]
    fn stats_triangle_and_edge() {
        let t = bare(3, &[(0, 1), (1, 2), (0, 2)]).stats();
        assert_eq!((t.nodes, t.edges_directed, t.density), (3, 6, 2.0));
        let e = bare(2, &[(0, 1)]).stats();
        assert_eq!((e.nodes, e.edges_directed, e.density), (2, 2, 1.0));
    }

    #[test]
    fn permutation_preserves_structure() {
        let g = synthesize_degree_features(&bare(4, &[(0, 1), (0, 2), (0, 3)]));
        let p = g.permuted(&[3, 0, 1, 2]);
        assert_eq!(p.edges, vec![(0, 3), (1, 3), (2, 3)]);
        assert_eq!(p.features.row(3), &[1.0, 1.0]);
    }
}
