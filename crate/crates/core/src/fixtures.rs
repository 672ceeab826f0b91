//! Small hand-built datasets for tests, examples and smoke runs.

use crate::diff::Matrix;
use crate::graph::{biased_split, Comparator, Criterion, Dataset, Graph, Split, SplitSpec};

pub fn path(id: usize, n: usize, label: usize) -> Graph {
    Graph::new(id, n, (1..n).map(|v| (v - 1, v)), Matrix::zeros(n, 0), label)
}

pub fn clique(id: usize, n: usize, label: usize) -> Graph {
    let edges = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j)));
    Graph::new(id, n, edges, Matrix::zeros(n, 0), label)
}

/// Twelve graphs: paths (class 0) and cliques (class 1) on 3 to 8 nodes,
/// with degree features.
pub fn paths_and_cliques() -> Dataset {
    let mut graphs = Vec::new();
    for n in 3..=8 {
        graphs.push(path(graphs.len(), n, 0));
        graphs.push(clique(graphs.len(), n, 1));
    }
    let mut ds = Dataset {
        name: "paths-and-cliques".into(),
        graphs,
        feature_dim: 0,
        original_labels: vec![0, 1],
    };
    ds.ensure_features();
    ds
}

/// Graphs under 7 nodes go to train (6) and validation (2); the 7- and
/// 8-node graphs are test.
pub fn paths_and_cliques_spec() -> SplitSpec {
    SplitSpec {
        criterion: Criterion::NodeCount,
        comparator: Comparator::LessThan,
        threshold: 7.0,
        train_count: 6,
        val_count: 2,
    }
}

pub fn paths_and_cliques_split(dataset: &Dataset, seed: u64) -> Split {
    biased_split(&dataset.graphs, &paths_and_cliques_spec(), seed).expect("fixture split is satisfiable")
}
