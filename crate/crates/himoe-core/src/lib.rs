//! Hierarchical mixture-of-experts action policy trained with flow matching,
//! exercised on synthetic multi-embodiment planar-arm manipulation data.
//!
//! Crate layout mirrors the subsystems:
//! - [`tensor`]: dense tensors + reverse-mode autodiff
//! - [`codec`]: unified 24-dim action/state vectors across embodiments
//! - [`context`]: trainable context encoder exposing per-layer KV pairs
//! - [`model`]: the hierarchical MoE action expert
//! - [`objectives`]: flow-matching loss plus the two expert regularizers
//! - [`sampler`]: Euler integration of the learned vector field
//! - [`synth`]: synthetic embodiments, scripted experts, datasets, rollouts
//! - [`train`]: optimizer, schedule, checkpoints, metrics, sweeps

pub mod codec;
pub mod context;
pub mod error;
pub mod model;
pub mod objectives;
pub mod sampler;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
