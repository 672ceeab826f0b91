//! Prototype classifier: class means in embedding space, squared Euclidean
//! distances, softmax over negative distances.

use serde::{Deserialize, Serialize};

use crate::diff::{Matrix, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub prototypes: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
    /// Epoch at which these prototypes were computed.
    pub epoch: usize,
}

impl PrototypeSet {
    pub fn num_classes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.first().map_or(0, Vec::len)
    }

    /// K×M matrix of prototypes.
    pub fn as_matrix(&self) -> Matrix {
        Matrix::from_rows(&self.prototypes)
    }

    pub fn distances(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.prototypes.iter().map(|p| sq_euclidean(z, p)).collect()
    }
}

/// Per-class arithmetic mean of `(embedding, label)` pairs.
pub fn compute_prototypes<'a>(
    embeddings: impl IntoIterator<Item = (&'a [f64], usize)>,
    num_classes: usize,
    epoch: usize,
) -> Result<PrototypeSet> {
    let mut sums: Vec<Vec<f64>> = vec![Vec::new(); num_classes];
    let mut counts = vec![0usize; num_classes];
    for (z, label) in embeddings {
        if label >= num_classes {
            return Err(Error::Training(format!("label {label} outside 0..{num_classes}")));
        }
        let acc = &mut sums[label];
        if acc.is_empty() {
            acc.resize(z.len(), 0.0);
        } else if acc.len() != z.len() {
            return Err(Error::contract("embeddings of differing length"));
        }
        for (a, x) in acc.iter_mut().zip(z) {
            *a += x;
        }
        counts[label] += 1;
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Training(format!("class {k} has no training embeddings")));
    }
    let prototypes = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| s.into_iter().map(|x| x / c as f64).collect())
        .collect();
    Ok(PrototypeSet {
        prototypes,
        counts,
        epoch,
    })
}

pub fn sq_euclidean(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "distance between vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Softmax of negative distances, shifted by the smallest distance.
pub fn probabilities_from_distances(d: &[f64]) -> Vec<f64> {
    let min = d.iter().copied().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = d.iter().map(|&x| (min - x).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|x| x / total).collect()
}

pub fn class_probabilities(z: &[f64], protos: &PrototypeSet) -> Result<Vec<f64>> {
    Ok(probabilities_from_distances(&protos.distances(z)?))
}

/// Index of the nearest prototype; ties go to the lowest index.
pub fn argmin(d: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in d.iter().enumerate() {
        if x < d[best] {
            best = k;
        }
    }
    best
}

pub fn predict(z: &[f64], protos: &PrototypeSet) -> Result<usize> {
    Ok(argmin(&protos.distances(z)?))
}

/// Log class probabilities for a B×M batch of embeddings on the tape,
/// with the prototypes held constant. Returns B×K.
pub fn log_probabilities(tape: &mut Tape, z: Var, protos: &PrototypeSet) -> Var {
    let (b, _) = tape.value(z).shape();
    let k = protos.num_classes();
    // ‖z‖² − 2 z·p + ‖p‖²
    let zsq = tape.square(z);
    let znorm = tape.row_sums(zsq);
    let znorm = tape.broadcast_col(znorm, k);
    let pt = tape.constant(protos.as_matrix().transpose());
    let cross = tape.matmul(z, pt);
    let cross = tape.scale(cross, -2.0);
    let pnorm: Vec<f64> = protos
        .prototypes
        .iter()
        .map(|p| p.iter().map(|x| x * x).sum())
        .collect();
    let pnorm = tape.constant(Matrix::row_vector(&pnorm));
    let pnorm = tape.broadcast_row(pnorm, b);
    let dist = tape.add(znorm, cross);
    let dist = tape.add(dist, pnorm);
    let logits = tape.scale(dist, -1.0);

    let lv = tape.value(logits);
    let row_max: Vec<f64> = (0..b)
        .map(|i| lv.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let row_max = tape.constant(Matrix::col_vector(&row_max));
    let row_max_k = tape.broadcast_col(row_max, k);
    let shifted = tape.sub(logits, row_max_k);
    let e = tape.exp(shifted);
    let total = tape.row_sums(e);
    let log_total = tape.ln(total);
    let lse = tape.add(log_total, row_max);
    let lse = tape.broadcast_col(lse, k);
    tape.sub(logits, lse)
}
