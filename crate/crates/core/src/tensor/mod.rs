//! Dense arrays and reverse-mode automatic differentiation.

pub mod kernels;
mod ndarray;
mod tape;

pub use ndarray::{NdArray, MAX_RANK};
pub use tape::{CustomOp, ExtremeMode, Gradients, NodeId, Tape};
