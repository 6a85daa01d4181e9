//! Inversion for cascaded pixel-space diffusion.
//!
//! The crate implements deterministic DDIM inversion, null-text inversion for
//! the base stage and per-timestep iterative inversion for super-resolution
//! stages, all exercised on small toy denoisers: two analytic oracles and a
//! four-layer convolutional network with hand-written reverse-mode gradients.
//! A DiffEdit-style editor, reconstruction metrics and a seeded evaluation
//! harness sit on top.

pub mod cascade;
pub mod denoiser;
pub mod editing;
pub mod embedding;
pub mod error;
pub mod harness;
pub mod inversion;
pub mod io;
pub mod metrics;
pub mod schedule;
pub mod tensor;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
pub use tensor::StateTensor;
