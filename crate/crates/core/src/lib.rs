//! Weakly supervised 3D anomaly detection with latent diffusion.
//!
//! A vector-quantized autoencoder ([`vqcodec`]) compresses volume patches into a
//! latent grid. A denoising network ([`diffnet`]) trained on healthy latents is used
//! by the samplers in [`diffusion`] to noise a latent to level `L` and walk it back,
//! optionally steered by a weak-label [`classifier`]. The voxel-wise difference
//! between input and reconstruction is cleaned up by [`postprocess`] and scored by
//! [`evalkit`]. [`phantom`] provides procedurally generated test data and
//! [`pipeline`] ties the stages together.

pub mod classifier;
pub mod config;
pub mod diffnet;
pub mod diffusion;
pub mod error;
pub mod evalkit;
pub mod montage;
pub mod par;
pub mod phantom;
pub mod pipeline;
pub mod postprocess;
pub mod rng;
pub mod volgrid;
pub mod vqcodec;

pub use error::{Error, Result};
