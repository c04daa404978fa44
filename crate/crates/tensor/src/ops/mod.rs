//! Forward and backward kernels on plain tensors. The autodiff layer in
//! [`crate::graph`] wires these together.

pub mod conv;
pub mod elementwise;
pub mod norm;
pub mod pool;
pub mod resize;
