//! Dense matrices, reverse-mode differentiation and Adam.

mod check;
mod matrix;
mod params;
mod tape;

pub use check::{finite_diff_check, ABS_FALLBACK};
pub use matrix::Matrix;
pub use params::{AdamConfig, ParamId, ParamStore};
pub use tape::{sigmoid, EdgeList, Tape, Var};
