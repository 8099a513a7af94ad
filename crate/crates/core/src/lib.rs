//! Proto-Caps: an interpretable capsule network for lung nodule malignancy
//! prediction whose attribute capsules are explained by prototypes.
//!
//! Everything numeric is generic over [`numerics::Scalar`]; training uses
//! `f32` and gradient checks `f64`. The aliases below name the common
//! instantiations.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod prototypes;
pub mod training;

pub use error::{Error, Result};

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type ParamStore32 = numerics::ParamStore<f32>;
pub type ParamStore64 = numerics::ParamStore<f64>;
pub type ProtoCaps32 = model::ProtoCaps<f32>;
pub type ProtoCaps64 = model::ProtoCaps<f64>;
pub type PrototypeBank32 = prototypes::PrototypeBank<f32>;
pub type PrototypeBank64 = prototypes::PrototypeBank<f64>;
