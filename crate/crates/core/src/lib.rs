//! Toy dual-path diffusion editing engine.
//!
//! A self-contained pixel-space diffusion model over a procedural shape/color
//! world, plus the editing machinery built on top of it: DDIM sampling and
//! inversion, dual-path feature injection with a unified self-attention
//! mechanism, latent fusion, and desk-scale evaluation metrics.

pub mod container;
pub mod control;
pub mod error;
pub mod graph;
pub mod imgio;
pub(crate) mod kernel;
pub mod layers;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod toyworld;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use rng::{Rng, Stream};
pub use tensor::{conv2d, group_norm, Dtype, Elem, Tensor};
