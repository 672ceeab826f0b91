//! Soft rationale extraction: a learned weight on every existing edge and
//! a learned gate on every feature column.

use std::rc::Rc;

use rand::Rng;

use crate::diff::{EdgeList, Matrix, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::Graph;

/// Parameters of both masks.
///
/// * `projection`: d×p weights of the one-layer node projection `H = X W`.
/// * `feature_logits`: 1×d free logits; the feature gate is their sigmoid,
///   so it always lies in (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RationaleParams {
    pub projection: ParamId,
    pub feature_logits: ParamId,
}

impl RationaleParams {
    pub fn init(store: &mut ParamStore, rng: &mut impl Rng, feature_dim: usize, proj_dim: usize) -> Self {
        assert!(feature_dim >= 1 && proj_dim >= 1);
        let projection = store.insert("rationale.projection", glorot(rng, feature_dim, proj_dim));
        let feature_logits = store.insert("rationale.feature_logits", Matrix::zeros(1, feature_dim));
        Self {
            projection,
            feature_logits,
        }
    }

    pub fn feature_dim(&self, store: &ParamStore) -> usize {
        store.value(self.feature_logits).cols()
    }
}

/// Glorot/Xavier uniform initialization.
pub(crate) fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Matrix {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Matrix::from_vec(
        fan_in,
        fan_out,
        (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect(),
    )
}

pub(crate) fn edge_list(graph: &Graph) -> EdgeList {
    Rc::from(graph.edges.as_slice())
}

fn check_features(graph: &Graph, store: &ParamStore, params: &RationaleParams) -> Result<()> {
    if graph.feature_dim() == 0 {
        return Err(Error::contract(format!(
            "graph {} has no node features; synthesize degree features first",
            graph.id
        )));
    }
    let d = params.feature_dim(store);
    if graph.feature_dim() != d {
        return Err(Error::contract(format!(
            "graph {} has {} feature columns but the mask expects {d}",
            graph.id,
            graph.feature_dim()
        )));
    }
    Ok(())
}

/// Edge weights `σ(⟨H_i, H_j⟩)` with `H = X W`, one per stored edge, as an
/// m×1 column on `tape`.
pub fn structure_mask(
    tape: &mut Tape,
    store: &ParamStore,
    graph: &Graph,
    features: Var,
    params: &RationaleParams,
) -> Result<Var> {
    check_features(graph, store, params)?;
    let w = tape.param(store, params.projection);
    let h = tape.matmul(features, w);
    let scores = tape.pair_dot(h, edge_list(graph));
    Ok(tape.sigmoid(scores))
}

/// `X ⊙ σ(η)` with the gate broadcast over nodes.
pub fn apply_feature_mask(
    tape: &mut Tape,
    store: &ParamStore,
    graph: &Graph,
    features: Var,
    params: &RationaleParams,
) -> Result<Var> {
    check_features(graph, store, params)?;
    let logits = tape.param(store, params.feature_logits);
    let gate = tape.sigmoid(logits);
    let gate = tape.broadcast_row(gate, graph.node_count);
    Ok(tape.mul(features, gate))
}

/// Gradient-free structure mask: `(edge, weight)` for every stored edge.
pub fn edge_weights(
    store: &ParamStore,
    graph: &Graph,
    params: &RationaleParams,
) -> Result<Vec<((usize, usize), f64)>> {
    let mut tape = Tape::no_grad();
    let x = tape.constant(graph.features.clone());
    let w = structure_mask(&mut tape, store, graph, x, params)?;
    Ok(graph
        .edges
        .iter()
        .copied()
        .zip(tape.value(w).as_slice().iter().copied())
        .collect())
}

/// Gradient-free feature mask.
pub fn masked_features(store: &ParamStore, graph: &Graph, params: &RationaleParams) -> Result<Matrix> {
    let mut tape = Tape::no_grad();
    let x = tape.constant(graph.features.clone());
    let out = apply_feature_mask(&mut tape, store, graph, x, params)?;
    Ok(tape.value(out).clone())
}
