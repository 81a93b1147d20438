//! Mixture-of-experts dense depth prediction at desk scale.
//!
//! The crate is organized around a small set of dense 2-D carriers
//! ([`Grid`], [`GridStack`], [`MaskGrid`]) and the pipeline built on them:
//!
//! - [`grid`] — containers, the `MDG1` binary grid format, PPM image export
//! - [`mixture`] — temperature-scaled gating, mixture combination, mixture
//!   negative log-likelihood and entropy regularizer with analytic gradients
//! - [`net`] — a small convolutional encoder with K expert branches and a
//!   gating head, hand-derived backpropagation, `MDC1` checkpoints
//! - [`train`] — AdamW with decoupled selective weight decay, deterministic
//!   training loop, temperature annealing, entropy-weight ablation
//! - [`scene`] — procedural piecewise-smooth depth scenes with analytically
//!   known discontinuity masks
//! - [`eval`] — Sobel edge extraction, boundary segmentation metrics, and
//!   monocular depth metrics with median scaling
//! - [`cloud`] — pinhole unprojection, normal estimation, accuracy /
//!   completeness / normal-consistency metrics, flying-point detection,
//!   confidence masking
//! - [`config`] — the flat `key=value` run configuration shared by the CLI

pub mod cloud;
pub mod config;
pub mod error;
pub mod eval;
pub mod grid;
pub mod mixture;
pub mod net;
pub mod parallel;
pub mod rng;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
pub use grid::{Grid, GridStack, MaskGrid};
