pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod flops;
pub mod fusion;
pub mod gradcheck;
pub mod image;
mod kernels;
pub mod model;
pub mod nn;
pub mod report;
pub mod rgb;
pub mod scalar;
pub mod sdd;
pub mod skeleton;
pub mod stgraph;
pub mod synthgen;
pub mod trainer;
pub mod tensor;

pub use autograd::{Gradients, ParamId, ParamStore, Tape, Var};
pub use error::{Error, Result};
pub use kernels::ConvGeom;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = model::IPayModel<f32>;
pub type Model64 = model::IPayModel<f64>;
