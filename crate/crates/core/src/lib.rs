//! GraphTEN: graph-enhanced texture encoding on a small CPU autodiff engine.
//!
//! The numeric core in [`ndtensor`] is generic over the scalar type. The
//! network built on top of it runs in `f64`; the aliases below name the
//! concrete types the rest of the crate uses.

pub mod backbone;
pub mod config;
pub mod error;
pub mod gradsuite;
pub mod graphmod;
pub mod layers;
pub mod ndtensor;
pub mod patchenc;
pub mod scalar;
pub mod texdata;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// `f64` tensor.
pub type Tensor = ndtensor::Tensor<f64>;
/// `f64` computation graph.
pub type Graph = ndtensor::Graph<f64>;
/// `f64` parameter store.
pub type ParamStore = ndtensor::ParamStore<f64>;
