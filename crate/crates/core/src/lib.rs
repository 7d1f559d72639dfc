pub mod attention;
pub mod autodiff;
pub mod config;
pub mod denoiser;
pub mod baselines;
pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod image_io;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use rng::RandomSource;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
pub type Graph32 = Graph<f32>;
pub type Model64 = model::Model<f64>;
pub type Model32 = model::Model<f32>;
