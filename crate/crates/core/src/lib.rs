//! Unpaired image-to-image translation with denoising diffusion models.
//!
//! Two per-domain ε-predictors share a deterministic DDIM latent space. A
//! source image is encoded with the source model and decoded with the target
//! model ([`translate::translate_ddib`]). The correlation-guided variant
//! ([`translate::translate_ddic`]) runs a parallel source-domain reconstruction
//! and, at every reverse step, takes one gradient step on the target latent
//! that increases the Pearson correlation between the median-filtered
//! reconstructions.

// `!(x > 0.0)` style checks are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod image;
pub mod manifest;
pub mod metrics;
pub mod nn;
pub mod sampler;
pub mod schedule;
pub mod translate;

pub use error::{Error, Result};
pub use image::{ImageGrid, IntensityRange};
