//! Phase retrieval with classical alternating projections and diffusion-model
//! posterior sampling.
//!
//! The crate is organized bottom-up:
//!
//! - [`field_ops`]: real/complex grids, unitary 2-D DFT, zero-padded oversampling
//! - [`dprt`]: the flat binary tensor format used for every dump
//! - [`linops`]: linear operators, dense SVD, CG-based pseudoinverse
//! - [`forward_model`]: noisy magnitude measurements `y² = |Ax|² + w`
//! - [`classic_pr`]: HIO, ER, general alternating projections, RandomInit
//! - [`ddrm_core`]: noise schedules, the spectral DDRM sampler and its
//!   simplified noiseless form
//! - [`ddrm_pr`]: the nonlinear DDRM-PR pipeline, sample averaging, grid search
//! - [`denoise`]: the denoiser boundary, builtin denoisers, DNZ1 wire protocol
//! - [`eval`]: PSNR, SSIM and trivial-ambiguity alignment
//! - [`fixtures`]: seeded synthetic test images
//! - [`selftest`]: internal consistency properties behind `--task selftest`
//! - [`cli`]: the `ddrmpr` command-line driver
//!
//! See the `examples/` directory for one runnable program per capability.

// `!(x > 0.0)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classic_pr;
pub mod cli;
pub mod ddrm_core;
pub mod ddrm_pr;
pub mod denoise;
pub mod dprt;
pub mod error;
pub mod eval;
pub mod field_ops;
pub mod fixtures;
pub mod forward_model;
pub mod linops;
pub mod rng;
pub mod selftest;

pub use error::{Error, Result};
pub use num_complex::Complex64;
