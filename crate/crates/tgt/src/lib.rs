//! Desk-scale diffusion try-on distillation lab.
//!
//! A self-contained pipeline for studying teacher–student diffusion
//! distillation on a procedural sprite try-on benchmark: a small f64
//! tensor/autodiff engine, tiny conditioned U-Nets, score-matching plus
//! adversarial distillation, trajectory-consistency training for the
//! garment branch, latent-concatenation conditioning for the try-on
//! branch, and an image-metric battery (SSIM, Fréchet/kernel feature
//! distances and perceptual proxies) over a frozen seeded extractor.
//!
//! Start with the `examples/` directory: each file is a runnable tour of
//! one capability (dataset generation, gradient checking, sampling,
//! teacher training, distillation, try-on training, evaluation,
//! ablations). The `tgt` binary wraps the same entry points as
//! subcommands.

pub mod cli;
pub mod data;
pub mod error;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
