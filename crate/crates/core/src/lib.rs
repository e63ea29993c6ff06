//! Pyramid-latent rectified-flow diffusion at desk scale.
//!
//! The crate is organized bottom-up:
//!
//! * [`graph`] — a small f64 reverse-mode autodiff tape over `ndarray`.
//! * [`nn`] — parameter store, initializers, Adam, spectral-norm machinery.
//! * [`blocks`] — spatial-channel attention, res-skip blocks, dropout schedule,
//!   RGB conversion stems.
//! * [`pyramid`] — the multi-resolution latent stack and its arithmetic.
//! * [`autoencoder`] — spectrally-normalized pyramid encoder and branched decoder.
//! * [`unet`] — the branched diffusion network over pyramid latents.
//! * [`rectflow`] — straight-trajectory interpolation, the pyramid flow loss,
//!   time sampling, latent rescaling and the training step.
//! * [`sampler`] — Euler and Dormand-Prince ODE integration plus generation.
//! * [`data`] — dataset manifests, filtering/cropping, synthetic corpora and
//!   the pixel-feature Frechet distance.
//! * [`checkpoint`] — tensor archive with manifest and checksum.

pub mod autoencoder;
pub mod blocks;
pub mod check;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod graph;
pub mod linalg;
pub mod nn;
pub mod pyramid;
pub mod rectflow;
pub mod rng;
pub mod sampler;
pub mod unet;

pub use error::{PdmError, Result};
