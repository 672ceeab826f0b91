//! Out-of-distribution robust graph classification by same-label manifold
//! mixup, with extreme-value calibration of the virtual samples.

pub mod augment;
pub mod backbone;
pub mod diff;
pub mod error;
pub mod evt;
pub mod fixtures;
pub mod graph;
pub mod metric;
pub mod rationale;
pub mod train;

pub use error::{Error, Result};
