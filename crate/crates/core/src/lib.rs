//! RGB-thermal gas segmentation: dataset handling, synthetic scenes, the
//! two-stream cross-attention network, losses, metrics and training.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod predict;
pub mod synth;
pub mod train;
pub mod util;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::{Model, ModelConfig, Prediction, Scheme};

pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
pub type Prediction32 = Prediction<f32>;
pub type Prediction64 = Prediction<f64>;
