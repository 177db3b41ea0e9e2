//! Haze synthesis, joint transmission/dehazing networks and SSIM evaluation.

pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod parallel;
pub mod physics;
pub mod scalar;
pub mod selfcheck;
pub mod tensor;
pub mod training;

pub use autodiff::{Graph, NormMode, RunningStats, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
pub type Graph32 = Graph<f32>;
pub type Network64 = networks::Network<f64>;
pub type Network32 = networks::Network<f32>;
