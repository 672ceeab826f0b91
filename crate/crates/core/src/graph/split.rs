//! One-sided biased partitions: graphs satisfying a size/density
//! predicate feed train and validation, everything else is test.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{compute_graph_stats, Graph};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    NodeCount,
    EdgeCount,
    Density,
}

impl Criterion {
    /// The statistic the predicate compares. Edge count uses directed
    /// entries so that density = edges / nodes holds per graph.
    pub fn measure(self, g: &Graph) -> f64 {
        let s = compute_graph_stats(g);
        match self {
            Criterion::NodeCount => s.nodes as f64,
            Criterion::EdgeCount => s.edges_directed as f64,
            Criterion::Density => s.density,
        }
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nodes" | "node_count" => Ok(Criterion::NodeCount),
            "edges" | "edge_count" => Ok(Criterion::EdgeCount),
            "density" => Ok(Criterion::Density),
            other => Err(Error::Config(format!(
                "unknown bias criterion {other:?} (expected nodes, edges or density)"
            ))),
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criterion::NodeCount => "nodes",
            Criterion::EdgeCount => "edges",
            Criterion::Density => "density",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparator {
    LessThan,
    GreaterThan,
}

impl Comparator {
    pub fn holds(self, value: f64, threshold: f64) -> bool {
        match self {
            Comparator::LessThan => value < threshold,
            Comparator::GreaterThan => value > threshold,
        }
    }
}

impl FromStr for Comparator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lt" | "less_than" => Ok(Comparator::LessThan),
            "gt" | "greater_than" => Ok(Comparator::GreaterThan),
            other => Err(Error::Config(format!(
                "unknown comparator {other:?} (expected lt or gt)"
            ))),
        }
    }
}

impl fmt::Display for Comparator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Comparator::LessThan => "lt",
            Comparator::GreaterThan => "gt",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub criterion: Criterion,
    pub comparator: Comparator,
    pub threshold: f64,
    pub train_count: usize,
    pub val_count: usize,
}

impl SplitSpec {
    pub fn qualifies(&self, g: &Graph) -> bool {
        self.comparator.holds(self.criterion.measure(g), self.threshold)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionStats {
    pub graphs: usize,
    pub avg_nodes: f64,
    pub avg_edges: f64,
    pub avg_density: f64,
    /// Whether `avg_density` agrees with `avg_edges / avg_nodes` within 5%.
    pub density_consistent: bool,
}

impl PartitionStats {
    pub fn of<'a>(graphs: impl IntoIterator<Item = &'a Graph>) -> Self {
        let (mut count, mut n, mut e, mut d) = (0usize, 0.0, 0.0, 0.0);
        for g in graphs {
            let s = compute_graph_stats(g);
            count += 1;
            n += s.nodes as f64;
            e += s.edges_directed as f64;
            d += s.density;
        }
        if count == 0 {
            return Self {
                graphs: 0,
                avg_nodes: 0.0,
                avg_edges: 0.0,
                avg_density: 0.0,
                density_consistent: true,
            };
        }
        let c = count as f64;
        let (avg_nodes, avg_edges, avg_density) = (n / c, e / c, d / c);
        let ratio = avg_edges / avg_nodes;
        Self {
            graphs: count,
            avg_nodes,
            avg_edges,
            avg_density,
            density_consistent: (ratio - avg_density).abs() <= 0.05 * avg_density.abs().max(f64::MIN_POSITIVE),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub train: PartitionStats,
    pub val: PartitionStats,
    pub test: PartitionStats,
}

/// Graph ids per partition plus their statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub stats: SplitStats,
}

/// Shuffle the qualifying graphs with `seed`, take `train_count` then
/// `val_count` of them; every other graph is test, in id order.
pub fn biased_split(graphs: &[Graph], spec: &SplitSpec, seed: u64) -> Result<Split> {
    let mut qualifying: Vec<usize> = graphs
        .iter()
        .enumerate()
        .filter(|(_, g)| spec.qualifies(g))
        .map(|(i, _)| i)
        .collect();
    let needed = spec.train_count + spec.val_count;
    if spec.train_count == 0 || spec.val_count == 0 {
        return Err(Error::Config("train and validation counts must be positive".into()));
    }
    if qualifying.len() < needed {
        return Err(Error::Config(format!(
            "only {} graphs satisfy {} {} {}, but train + val needs {needed}",
            qualifying.len(),
            spec.criterion,
            spec.comparator,
            spec.threshold
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    qualifying.shuffle(&mut rng);
    let train = qualifying[..spec.train_count].to_vec();
    let val = qualifying[spec.train_count..needed].to_vec();
    let mut taken = vec![false; graphs.len()];
    for &i in train.iter().chain(&val) {
        taken[i] = true;
    }
    let test: Vec<usize> = (0..graphs.len()).filter(|&i| !taken[i]).collect();
    let stats = SplitStats {
        train: PartitionStats::of(train.iter().map(|&i| &graphs[i])),
        val: PartitionStats::of(val.iter().map(|&i| &graphs[i])),
        test: PartitionStats::of(test.iter().map(|&i| &graphs[i])),
    };
    Ok(Split {
        train,
        val,
        test,
        stats,
    })
}

/// Smallest-margin threshold such that exactly `count` graphs satisfy
/// the predicate. Fails when ties make the count unattainable.
pub fn threshold_for_count(
    graphs: &[Graph],
    criterion: Criterion,
    comparator: Comparator,
    count: usize,
) -> Result<f64> {
    let mut values: Vec<f64> = graphs.iter().map(|g| criterion.measure(g)).collect();
    values.sort_by(f64::total_cmp);
    if comparator == Comparator::GreaterThan {
        values.reverse();
    }
    if count == 0 || count > values.len() {
        return Err(Error::Config(format!(
            "cannot select {count} of {} graphs",
            values.len()
        )));
    }
    if count == values.len() {
        let edge = values[count - 1];
        return Ok(match comparator {
            Comparator::LessThan => edge + 1.0,
            Comparator::GreaterThan => edge - 1.0,
        });
    }
    let (inside, outside) = (values[count - 1], values[count]);
    if inside == outside {
        let below = values.iter().filter(|&&v| v != inside && comparator.holds(v, inside)).count();
        let upto = below + values.iter().filter(|&&v| v == inside).count();
        return Err(Error::Config(format!(
            "ties at {criterion} = {inside}: attainable qualifying counts around {count} are {below} and {upto}"
        )));
    }
    // `outside` itself fails a strict comparison and `inside` passes it.
    Ok(outside)
}

/// Everything needed to reproduce a split, written next to each run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub dataset: String,
    pub criterion: Criterion,
    pub comparator: Comparator,
    pub threshold: f64,
    pub seed: u64,
    pub density_metric: String,
    /// Original graph label for each internal class index.
    pub label_map: Vec<i64>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub stats: SplitStats,
}

impl SplitManifest {
    pub fn new(dataset: &super::Dataset, spec: &SplitSpec, seed: u64, split: &Split) -> Self {
        Self {
            dataset: dataset.name.clone(),
            criterion: spec.criterion,
            comparator: spec.comparator,
            threshold: spec.threshold,
            seed,
            density_metric: "directed edge entries / nodes (average degree)".into(),
            label_map: dataset.original_labels.clone(),
            train: split.train.clone(),
            val: split.val.clone(),
            test: split.test.clone(),
            stats: split.stats.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Matrix;
    use proptest::prelude::*;

    fn sized(id: usize, n: usize) -> Graph {
        let edges: Vec<_> = (1..n).map(|v| (v - 1, v)).collect();
        Graph::new(id, n, edges, Matrix::zeros(n, 0), id % 2)
    }

    fn nodes_lt(threshold: f64, train: usize, val: usize) -> SplitSpec {
        SplitSpec {
            criterion: Criterion::NodeCount,
            comparator: Comparator::LessThan,
            threshold,
            train_count: train,
            val_count: val,
        }
    }

    #[test]
    fn small_graphs_train_large_graphs_test() {
        let graphs: Vec<_> = [3, 5, 30, 40].iter().enumerate().map(|(i, &n)| sized(i, n)).collect();
        let split = biased_split(&graphs, &nodes_lt(20.0, 1, 1), 0).unwrap();
        let mut tv: Vec<_> = split.train.iter().chain(&split.val).copied().collect();
        tv.sort();
        assert_eq!(tv, vec![0, 1]);
        assert_eq!(split.test, vec![2, 3]);
        assert_eq!(split.stats.test.avg_nodes, 35.0);
    }

    #[test]
    fn unsatisfiable_reports_count() {
        let graphs: Vec<_> = [3, 5, 30].iter().enumerate().map(|(i, &n)| sized(i, n)).collect();
        let err = biased_split(&graphs, &nodes_lt(20.0, 2, 1), 0).unwrap_err();
        assert!(err.to_string().contains("only 2 graphs"), "{err}");
    }

    #[test]
    fn threshold_from_count_gives_exact_test_size() {
        // 1178 graphs with distinct edge counts; 500 qualify → 678 test.
        let graphs: Vec<_> = (0..1178).map(|i| sized(i, 2 + (i * 7919) % 1178)).collect();
        let t = threshold_for_count(&graphs, Criterion::EdgeCount, Comparator::LessThan, 500).unwrap();
        let spec = SplitSpec {
            criterion: Criterion::EdgeCount,
            comparator: Comparator::LessThan,
            threshold: t,
            train_count: 400,
            val_count: 100,
        };
        assert_eq!(graphs.iter().filter(|g| spec.qualifies(g)).count(), 500);
        let split = biased_split(&graphs, &spec, 3).unwrap();
        assert_eq!(split.test.len(), 678);
    }

    #[test]
    fn threshold_from_count_greater_than() {
        let graphs: Vec<_> = (0..10).map(|i| sized(i, i + 1)).collect();
        let t = threshold_for_count(&graphs, Criterion::NodeCount, Comparator::GreaterThan, 3).unwrap();
        assert_eq!(graphs.iter().filter(|g| g.node_count as f64 > t).count(), 3);
    }

    #[test]
    fn ties_are_reported() {
        let graphs: Vec<_> = (0..6).map(|i| sized(i, if i < 4 { 5 } else { 9 })).collect();
        let err = threshold_for_count(&graphs, Criterion::NodeCount, Comparator::LessThan, 2).unwrap_err();
        assert!(err.to_string().contains("0 and 4"), "{err}");
    }

    #[test]
    fn density_consistency_flag() {
        let s = PartitionStats::of(&[sized(0, 4), sized(1, 4)]);
        assert!(s.density_consistent);
        let star = Graph::new(0, 50, (1..50).map(|v| (0, v)), Matrix::zeros(50, 0), 0);
        let pair = Graph::new(1, 2, [(0, 1)], Matrix::zeros(2, 0), 0);
        // Densities 1.96 and 1 average to 1.48; edges over nodes is 100 / 52.
        assert!(!PartitionStats::of(&[star, pair]).density_consistent);
    }

    proptest! {
        #[test]
        fn partitions_are_disjoint_exhaustive_and_deterministic(
            sizes in prop::collection::vec(1usize..40, 4..60),
            seed in any::<u64>(),
        ) {
            let graphs: Vec<_> = sizes.iter().enumerate().map(|(i, &n)| sized(i, n)).collect();
            let qualifying = graphs.iter().filter(|g| g.node_count < 20).count();
            prop_assume!(qualifying >= 2);
            let spec = nodes_lt(20.0, qualifying / 2, qualifying - qualifying / 2);
            prop_assume!(spec.train_count > 0);
            let a = biased_split(&graphs, &spec, seed).unwrap();
            let b = biased_split(&graphs, &spec, seed).unwrap();
            prop_assert_eq!(&a, &b);
            let mut all: Vec<_> = a.train.iter().chain(&a.val).chain(&a.test).copied().collect();
            all.sort();
            prop_assert_eq!(all, (0..graphs.len()).collect::<Vec<_>>());
            for &i in a.train.iter().chain(&a.val) {
                prop_assert!(graphs[i].node_count < 20);
            }
            for g in graphs.iter().filter(|g| g.node_count >= 20) {
                prop_assert!(a.test.contains(&g.id));
            }
            prop_assert_eq!(a.stats.train.graphs + a.stats.val.graphs + a.stats.test.graphs, graphs.len());
        }
    }
}
