//! GCN encoder over the rationale graph, followed by a graph-level pooling.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Matrix, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rationale::{self, apply_feature_mask, glorot, structure_mask, RationaleParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    Max,
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "max" => Ok(Pooling::Max),
            other => Err(Error::Config(format!("unknown pooling {other:?} (expected mean or max)"))),
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Mean => "mean",
            Pooling::Max => "max",
        })
    }
}

/// One GCN layer: `weight` is d_in×d_out, `bias` is 1×d_out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GcnLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GcnParams {
    pub layers: Vec<GcnLayer>,
}

impl GcnParams {
    /// `layers` GCN layers mapping `input_dim` → `hidden_dim` → … → `output_dim`.
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        input_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
        layers: usize,
    ) -> Self {
        assert!(layers >= 1, "at least one GCN layer");
        let mut dims = vec![input_dim];
        dims.extend(std::iter::repeat_n(hidden_dim, layers - 1));
        dims.push(output_dim);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| GcnLayer {
                weight: store.insert(format!("gcn.{l}.weight"), glorot(rng, w[0], w[1])),
                bias: store.insert(format!("gcn.{l}.bias"), Matrix::zeros(1, w[1])),
            })
            .collect();
        Self { layers }
    }

    pub fn output_dim(&self, store: &ParamStore) -> usize {
        self.layers
            .last()
            .map(|l| store.value(l.weight).cols())
            .unwrap_or(0)
    }
}

/// `D^{-1/2} (A + I) D^{-1/2}` for a weighted symmetric n×n adjacency on
/// the tape, with D the weighted degree of `A + I`.
pub fn normalize_adjacency_var(tape: &mut Tape, adjacency: Var) -> Var {
    let n = tape.value(adjacency).rows();
    let eye = tape.constant(Matrix::identity(n));
    let with_loops = tape.add(adjacency, eye);
    let degree = tape.row_sums(with_loops);
    let log_deg = tape.ln(degree);
    let scaled = tape.scale(log_deg, -0.5);
    let inv_sqrt = tape.exp(scaled);
    let inv_sqrt_t = tape.transpose(inv_sqrt);
    let outer = tape.matmul(inv_sqrt, inv_sqrt_t);
    tape.mul(with_loops, outer)
}

/// Dense normalized propagation matrix from a weighted edge list.
pub fn normalize_adjacency(edge_weights: &[((usize, usize), f64)], n: usize) -> Matrix {
    let mut a = Matrix::zeros(n, n);
    for &((i, j), w) in edge_weights {
        a[(i, j)] = w;
        a[(j, i)] = w;
    }
    let mut tape = Tape::no_grad();
    let a = tape.constant(a);
    let out = normalize_adjacency_var(&mut tape, a);
    tape.value(out).clone()
}

/// The full embedding function: masks, GCN stack, pooling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoder {
    pub rationale: RationaleParams,
    pub gcn: GcnParams,
    pub pooling: Pooling,
}

impl Encoder {
    /// Embed one graph as a 1×M row on `tape`.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, graph: &Graph) -> Result<Var> {
        let x = tape.constant(graph.features.clone());
        let xr = apply_feature_mask(tape, store, graph, x, &self.rationale)?;
        // The structure mask reads the unmasked features.
        let weights = structure_mask(tape, store, graph, x, &self.rationale)?;
        let adj = tape.scatter_sym(weights, rationale::edge_list(graph), graph.node_count);
        let prop = normalize_adjacency_var(tape, adj);

        let mut h = xr;
        let last = self.gcn.layers.len() - 1;
        for (l, layer) in self.gcn.layers.iter().enumerate() {
            let w = tape.param(store, layer.weight);
            let b = tape.param(store, layer.bias);
            let ah = tape.matmul(prop, h);
            let ahw = tape.matmul(ah, w);
            let b = tape.broadcast_row(b, graph.node_count);
            h = tape.add(ahw, b);
            if l < last {
                h = tape.relu(h);
            }
        }
        let z = match self.pooling {
            Pooling::Mean => tape.mean_rows(h),
            Pooling::Max => tape.max_rows(h),
        };
        if !tape.value(z).all_finite() {
            return Err(Error::Training(format!(
                "non-finite embedding for graph {}",
                graph.id
            )));
        }
        Ok(z)
    }

    /// Gradient-free embedding.
    pub fn embed(&self, store: &ParamStore, graph: &Graph) -> Result<Vec<f64>> {
        let mut tape = Tape::no_grad();
        let z = self.encode(&mut tape, store, graph)?;
        Ok(tape.value(z).as_slice().to_vec())
    }

    pub fn embed_all<'a>(
        &self,
        store: &ParamStore,
        graphs: impl IntoIterator<Item = &'a Graph>,
    ) -> Result<Vec<Vec<f64>>> {
        graphs.into_iter().map(|g| self.embed(store, g)).collect()
    }
}
