//! Joint latent-basis decomposition of weight stacks, sparse rotational
//! adapters built on top of it, low-rank baselines, and the numerical
//! checks that go with them.
//!
//! Module map:
//! - [`tensorio`]: the `FRODTNSR` container format and synthetic stacks
//! - [`linalg`]: QR / Jacobi eigen / Jacobi SVD / ridge inverse
//! - [`decomp`]: per-category QR, shared basis, per-layer factors
//! - [`adapter`]: FRoD, LoRA, VeRA, PiSSA and full fine-tuning layers
//! - [`analysis`]: spectral bounds, update geometry, Jacobian ranks, Hessians
//! - [`train`]: synthetic tasks, AdamW, schedules, runs and sweeps
//! - [`landscape`]: 2-D loss grids along principal or random directions

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapter;
pub mod analysis;
pub mod decomp;
pub mod landscape;
pub mod linalg;
pub mod rng;
pub mod tensorio;
pub mod train;

pub use linalg::Matrix;
pub use rng::SplitMix64;
