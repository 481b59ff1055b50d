//! Deterministic, CPU-only implementation of a conditional diffusion visuomotor
//! policy with a variational bottleneck on the U-Net backbone feature.
//!
//! The crate is `no_std + alloc`: everything in here is pure computation on
//! 64-bit floats. Persistence, configuration, and the command line live in the
//! companion `vrdp-cli` crate.
//!
//! Module map:
//!
//! - [`tensor`] / [`tape`] — dense f64 tensors and tape-based reverse-mode
//!   differentiation (rebuilt per forward pass).
//! - [`rng`] — the single deterministic generator all randomness flows from.
//! - [`schedule`] — noise schedules, the forward diffusion process, and the
//!   deterministic few-step sampler.
//! - [`nets`] — point-set observation encoder and the 3-stage 1D temporal
//!   U-Net with per-block feature-wise conditioning.
//! - [`vr`] — the variational bottleneck over the backbone feature: a
//!   timestep-conditioned Gaussian with a closed-form KL penalty.
//! - [`train`] — behavior-cloning loop: normalization, AdamW, cosine LR,
//!   and the combined denoising + KL loss.
//! - [`envs`] — synthetic 2D manipulation tasks with scripted experts,
//!   point-set observations, and receding-horizon rollouts.
//! - [`masklab`] — inference-time random feature masking sweeps and the
//!   derived signal-to-noise proxy metrics.
//! - [`theory`] — executable checks of the bottleneck identities: closed-form
//!   KL vs Monte Carlo, the loss/ELBO equivalence, and marginal consistency
//!   of the diffusion process.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod envs;
pub mod error;
pub mod masklab;
pub mod math;
pub mod nets;
pub mod params;
pub mod rng;
pub mod schedule;
pub mod tape;
pub mod tensor;
pub mod theory;
pub mod train;
pub mod vr;

pub use error::{CoreError, Result};
pub use rng::Rng;
pub use tape::{Tape, VarId};
pub use tensor::Tensor;
