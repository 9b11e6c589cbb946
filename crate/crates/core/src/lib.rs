//! Training-trajectory divergence experiments on small MLPs.
//!
//! The numeric core is generic over the scalar type (`f32` or `f64`); the
//! experiment layer runs in `f64`.

pub mod align;
pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod divergence;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod perturb;
pub mod plan;
pub mod repsim;
pub mod rng;
pub mod scalar;
pub mod train;

pub use error::{LabError, Result};
pub use scalar::Scalar;

pub type ParamSet64 = nn::ParamSet<f64>;
pub type ParamSet32 = nn::ParamSet<f32>;
pub type Dataset64 = dataset::Dataset<f64>;
pub type Dataset32 = dataset::Dataset<f32>;
pub type OptState64 = train::OptState<f64>;
pub type OptState32 = train::OptState<f32>;
pub type Checkpoint64 = checkpoint::Checkpoint<f64>;
