//! Desk-scale reinforcement-learning laboratory for differential visual
//! reasoning policies.
//!
//! The crate trains a compact differentiable sequence policy on synthetic
//! vision-grounded tasks with group-relative policy optimization, optionally
//! augmented with triplet-view KL constraints (diverge from a patch-masked
//! view, stay consistent with a diffusion-noised view) and an entropy
//! penalty on the perturbed views. Everything is exactly differentiable in
//! f64 and verified against finite differences, and every run is bitwise
//! reproducible from its config and seed.

pub mod autodiff;
pub mod checkpoint;
pub mod env;
pub mod error;
pub mod experiments;
pub mod objective;
pub mod policy;
pub mod rng;
pub mod train;
pub mod views;

pub use error::{DvrpError, Result};
