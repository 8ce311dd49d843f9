//! Backprop-free layer-wise training of forward-forward networks: dense and
//! convolutional goodness layers, a self-adapting training controller,
//! datasets and evaluation metrics.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision.

pub mod data;
pub mod error;
pub mod ffnet;
pub mod metrics;
pub mod numerics;
pub mod sampling;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{Rng, Tensor};
pub use scalar::Scalar;

/// Default working precision: `f64`, or `f32` with the `f32` feature.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Layer64 = ffnet::FFLayer<f64>;
pub type Layer32 = ffnet::FFLayer<f32>;
pub type Network64 = ffnet::FFNetwork<f64>;
pub type Network32 = ffnet::FFNetwork<f32>;
pub type Dataset64 = data::Dataset<f64>;
pub type Dataset32 = data::Dataset<f32>;
