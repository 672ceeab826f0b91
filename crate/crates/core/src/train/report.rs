use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::error::Result;
use crate::evt::EvtModel;

pub const HISTOGRAM_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub evt: Vec<EvtModel>,
    /// `None` for the baseline, which does not score samples.
    pub mean_omega: Option<f64>,
    pub max_omega: Option<f64>,
}

/// Where the partitions came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReference {
    pub dataset: String,
    /// Path of the split manifest, when one was written.
    pub manifest: Option<String>,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Equal-width counts over [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn unit(values: impl IntoIterator<Item = f64>) -> Self {
        let mut counts = vec![0; HISTOGRAM_BINS];
        for v in values {
            let bin = ((v.clamp(0.0, 1.0) * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
            counts[bin] += 1;
        }
        let edges = (0..=HISTOGRAM_BINS).map(|i| i as f64 / HISTOGRAM_BINS as f64).collect();
        Self { edges, counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub split: SplitReference,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub stopped_early: bool,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// OOD confidence of each test graph at its predicted class, under tail
    /// models fitted on the training split.
    pub test_confidence: Histogram,
    pub leakage_check_passed: bool,
    pub wall_clock_secs: f64,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// The report with wall-clock time zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_clock_secs: 0.0,
            ..self.clone()
        }
    }
}
