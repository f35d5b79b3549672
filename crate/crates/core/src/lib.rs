//! Sparse time-of-flight depth completion toolkit: exact EDT/NNI
//! preprocessing, a synthetic RGB-D scene generator, a from-scratch
//! autodiff engine, a UNet-like completion network with a residual head,
//! geometry-preserving losses, and uniform/mixed-precision
//! quantization-aware training with size accounting.

pub mod config;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod loss;
pub mod model;
pub mod normals;
pub mod preproc;
pub mod quant;
pub mod rng;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
