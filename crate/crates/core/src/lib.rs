//! Document-level relation extraction with relation-semantic logit adaptation.
//!
//! The crate is generic over the floating-point type ([`Scalar`]); the
//! `*64` aliases below are the double-precision instantiations used by the
//! command line and the experiment pipeline.

pub mod autodiff;
pub mod calibration;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod head;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = autodiff::Tensor<f64>;
pub type Graph64 = autodiff::Graph<f64>;
pub type ParamStore64 = autodiff::ParamStore<f64>;
pub type DocReModel64 = model::DocReModel<f64>;
