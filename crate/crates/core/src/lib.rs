//! Spike-driven hierarchical vision transformer.
//!
//! Activations are `f64` tensors shaped `[T, B, C, H, W]`; spiking layers emit
//! exact `{0, 1}` values and residual edges carry small integer counts.
//! Training runs through a tape-based reverse-mode differentiator
//! ([`autograd`]) with a surrogate gradient at every spiking neuron.

pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod embedding;
pub mod energy;
pub mod error;
pub mod kernels;
pub mod layers;
pub mod model;
pub mod neuron;
pub mod norm;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
