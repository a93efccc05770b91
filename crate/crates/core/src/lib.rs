//! All-in-one image restoration with multi-expert adaptive selection.

// `!(x >= 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod degrade;
pub mod error;
pub mod experts;
pub mod fdmee;
pub mod gradcheck;
pub mod mese;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod scalar;
pub mod tensor;
pub mod training;
pub mod tspg;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type Graph32 = numerics::Graph<f32>;
pub type Graph64 = numerics::Graph<f64>;
pub type ImagePair32 = degrade::ImagePair<f32>;
pub type ImagePair64 = degrade::ImagePair<f64>;
pub type Trainer32 = training::Trainer<f32>;
pub type Trainer64 = training::Trainer<f64>;
