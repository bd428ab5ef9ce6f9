//! Unsupervised time-series anomaly detection with reconstruction-driven
//! boundary negatives, a triplet encoder and a prototype bank.
//!
//! Models and losses are generic over [`Scalar`] (`f32` or `f64`); the
//! pipeline runs in `f64`. The aliases below name the `f64` instantiations.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod boundary_rl;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod numerics;
pub mod pipeline;
pub mod prototypes;
pub mod recon;
pub mod scalar;
pub mod scoring;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = numerics::Tensor<f64>;
pub type Graph64 = numerics::Graph<f64>;
pub type TimeSeries64 = data::TimeSeries<f64>;
pub type WindowSet64 = data::WindowSet<f64>;
pub type ReconModel64 = recon::ReconModel<f64>;
pub type Agent64 = boundary_rl::Agent<f64>;
pub type Pools64 = boundary_rl::Pools<f64>;
pub type TripletEncoder64 = encoder::TripletEncoder<f64>;
pub type PrototypeBank64 = prototypes::PrototypeBank<f64>;
