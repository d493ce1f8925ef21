//! Captioning objects in 3D scenes from their spatial relations.

pub mod autodiff;
pub mod data;
pub mod decoder;
pub mod diagnostics;
mod error;
pub mod geometry;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod otag;
mod scalar;
pub mod slgc;
#[cfg(test)]
mod testutil;

pub use autodiff::{AdamState, ParamId, ParamSet, Tape, Tensor, Var};
pub use error::{Error, Result};
pub use geometry::{Box3, VerticalDistances};
pub use scalar::Scalar;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type ParamSet64 = ParamSet<f64>;
pub type Box3f64 = Box3<f64>;
pub type Scene64 = data::Scene<f64>;
pub type LayoutGraph64 = slgc::LayoutGraph<f64>;
pub type Model64 = model::Model<f64>;
pub type Trainer64 = model::Trainer<f64>;
