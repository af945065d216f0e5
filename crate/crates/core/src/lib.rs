//! Higher-resolution diffusion inference at desk scale.
//!
//! This crate implements a self-cascade upscaling pipeline over toy
//! denoisers: generate at the training resolution, upsample the clean
//! latent, re-noise it to an intermediate timestep, and denoise again at
//! the doubled resolution while backbone-specific adaptations keep the
//! extrapolation stable.
//!
//! The pieces, bottom to top:
//!
//! - [`tensor`] — deterministic numerical kernels (resampling, Gaussian
//!   filtering, dilated convolution, patch geometry, scaled softmax).
//! - [`schedule`] — noise schedules, forward/reverse diffusion steps,
//!   timestep shifting, and the cosine detail blend.
//! - [`models`] — a tiny UNet and a tiny DiT behind a pluggable
//!   [`models::Denoiser`] trait, an exactly invertible latent codec,
//!   LoRA adapters with a training loop, and a checkpoint format.
//! - [`unet_scale`] — restrained dilated convolution policy, global /
//!   local self-attention, and frequency-split scale fusion.
//! - [`dit_scale`] — NTK rotary embeddings and attention temperature.
//! - [`cascade`] — the stage controller wiring all of the above into
//!   t2i / t2v / i2v runs.
//! - [`analysis`] — radial power spectrum, high-frequency energy ratio,
//!   and an autocorrelation repetition score.
//!
//! All arithmetic is `f64`. Every public operation is deterministic for
//! a fixed seed, including across thread counts: the `parallel` feature
//! (on by default) distributes independent output slices over rayon and
//! never reassociates a floating-point reduction.

pub mod analysis;
pub mod cascade;
pub mod dit_scale;
pub mod error;
pub mod linalg;
pub mod models;
pub mod parallel;
pub mod rng;
pub mod schedule;
pub mod synth;
pub mod tensor;
pub mod unet_scale;

pub use error::{Error, Result};
pub use tensor::LatentTensor;
