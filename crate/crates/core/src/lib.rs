//! Numerical core of a toy customized text-to-video pipeline.
//!
//! Three stages run on a small latent video diffusion model:
//!
//! 1. [`customize`]: learn a subject token embedding, then fine-tune the
//!    denoiser on a handful of reference images.
//! 2. [`stpm`]: sample a reference image and a video in lockstep, carrying
//!    the subject token's cross-attention column and the self-attention values
//!    from the reference into every frame along feature-matching flows
//!    ([`correspondence`]).
//! 3. [`ttro`]: re-noise the finished latents one step and climb latent- and
//!    pixel-domain subject-similarity rewards.
//!
//! The crate is `no_std` (with `alloc`); file formats, the CLI and the
//! experiment harness live in the companion `subjvid` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autograd;
pub mod codec;
pub mod correspondence;
pub mod customize;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pretrain;
pub mod rng;
pub mod stpm;
pub mod synth;
pub mod tensor;
pub mod ttro;

pub use error::{Error, Result};
pub use tensor::Tensor;
