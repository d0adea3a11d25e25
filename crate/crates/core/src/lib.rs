//! Desk-scale univariate time-series forecaster built on hierarchical
//! interleaved block attention.

pub mod attention;
pub mod autodiff;
pub mod cost;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod hiba;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod series;
pub mod tensor;
pub mod heads;
pub mod loss;
pub mod model;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default (training) precision.
pub type Tensor32 = tensor::Tensor<f32>;
/// Test/oracle precision.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type Forecaster32 = model::Forecaster<f32>;
pub type Forecaster64 = model::Forecaster<f64>;
pub type Trainer32 = train::Trainer<f32>;
pub type Trainer64 = train::Trainer<f64>;
