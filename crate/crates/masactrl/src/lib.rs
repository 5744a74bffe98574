//! Desk-scale diffusion engine with a pluggable attention-control layer:
//! mutual self-attention control for consistent synthesis and non-rigid
//! editing, mask-guided variants derived from cross-attention maps, and
//! deterministic DDIM inversion for real-image editing.
//!
//! The crate is organized around six parts:
//!
//! - [`schedule`] — closed-form diffusion math (α/ᾱ tables, forward
//!   noising, DDIM stepping and inversion, DDPM stepping, training loss).
//! - [`denoiser`] — a toy conditional U-Net built from residual +
//!   self-attention + cross-attention blocks, with a global attention-layer
//!   registry and a structured prompt embedder.
//! - [`attention`] — the control layer: source-branch recording, the edit
//!   gate, mask extraction from cross-attention maps, and (mask-guided)
//!   mutual self-attention.
//! - [`pipeline`] — orchestration: dual-branch editing, classifier-free
//!   guidance, vanilla synthesis, and real-image inversion.
//! - [`toy`] — a procedural shapes dataset with ground-truth semantics, the
//!   trainer, and the scene-classifier oracle used for evaluation.
//! - [`ckpt`] — the versioned binary container for checkpoints, latents and
//!   trajectories.
//!
//! Everything is deterministic given its seeds: the engine is single
//! threaded and all randomness flows through explicitly seeded ChaCha
//! generators.

pub mod attention;
pub mod ckpt;
pub mod denoiser;
pub mod error;
pub mod imgio;
pub mod nn;
pub mod pipeline;
pub mod schedule;
pub mod toy;

mod real;

pub use error::{Error, Result};
pub use real::Real;
pub use schedule::Latent;

#[cfg(doctest)]
mod booktests;
