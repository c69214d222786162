//! Separable state-space language model and gradient-based document mixing.
//!
//! The model's output after a split point depends on everything before it
//! only through the per-layer state at the split. Document states can
//! therefore be computed once, mixed with weights `α`, injected in front of
//! a query, and the weights optimized against the query's own likelihood.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below name the common instantiations.

pub mod baselines;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod ranking;
pub mod scalar;
pub mod ssm;
pub mod store;

pub use error::{Error, Result};
pub use ranking::RankedList;
pub use scalar::Scalar;

pub type ModelParamsF64 = ssm::ModelParams<f64>;
pub type ModelParamsF32 = ssm::ModelParams<f32>;
pub type StateStackF64 = ssm::StateStack<f64>;
pub type StateStackF32 = ssm::StateStack<f32>;
