//! Reverse-mode autodiff tensors for convolutional networks, generic over
//! the floating-point scalar.

pub mod error;
pub mod graph;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod param;
pub mod scalar;
pub mod tensor;

pub use error::{Result, TensorError};
pub use graph::{sigmoid, Gradients, Var};
pub use nn::{apply_updates, BatchNorm2d, Builder, Context, Conv2d};
pub use ops::conv::ConvGeometry;
pub use optim::Sgd;
pub use param::{ParamId, ParamKind, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Var32 = Var<f32>;
pub type Var64 = Var<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
