//! Conditional diffusion reconstruction for under-sampled MRI slices.
//!
//! The crate is organized bottom-up:
//!
//! - [`kspace`]: centered orthonormal 2-D DFT, sampling masks, coil combine
//! - [`datagen`]: synthetic phantom slices and paired under/full datasets
//! - [`schedule`]: forward-process noise schedule and its closed forms
//! - [`nn`] / [`denoiser`]: the conditional noise estimator with hand-written
//!   reverse-mode gradients
//! - [`trainer`]: optimizer loop and checkpointing
//! - [`sampler`]: reverse process with ensemble averaging
//! - [`metrics`]: reconstruction quality measures and reports
//!
//! Data-parallel loops go through [`parallel`], which is rayon-backed under
//! the default `parallel` feature and sequential without it.

pub mod datagen;
pub mod denoiser;
pub mod error;
pub mod io;
pub mod kspace;
pub mod metrics;
pub mod nn;
pub mod parallel;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
