//! Multi-instance point detection by heatmap regression.
//!
//! The crate covers the full pipeline:
//!
//! - [`grid`] and [`tape`]: dense grids and a small reverse-mode
//!   differentiation engine over the operations a U-Net needs, with
//!   [`gradcheck`] for finite-difference verification.
//! - [`codec`]: point sets ↔ Gaussian / Tanh / binary heatmaps.
//! - [`layers`]: the differentiable Gaussian filter and the convolutional
//!   soft-argmax output stage.
//! - [`losses`]: MSE, soft Dice, F-beta and their combinations.
//! - [`model`]: the two-stage network, Adam, plateau LR decay and training.
//! - [`data`]: annotations, group-level k-fold splits, label-consistent
//!   augmentation and a synthetic dataset generator.
//! - [`eval`]: radius-constrained greedy matching and detection metrics.
//! - [`io`]: NetPBM images, labelme annotations, atomic file writes.
//! - [`gradsuite`]: named gradient-check suites used by the CLI.
//!
//! Numeric code is generic over [`Real`] (`f32` or `f64`); the aliases below
//! fix the scalar for the common cases.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod codec;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod gradsuite;
pub mod grid;
pub mod io;
pub mod layers;
pub mod losses;
pub mod model;
pub mod scalar;
pub mod tape;

pub use codec::{Distribution, Point, PointSet};
pub use error::{Error, Result};
pub use scalar::Real;

pub type Grid64 = grid::Grid<f64>;
pub type Grid32 = grid::Grid<f32>;
pub type Heatmap64 = codec::Heatmap<f64>;
pub type Heatmap32 = codec::Heatmap<f32>;
pub type Tape64 = tape::Tape<f64>;
pub type Tape32 = tape::Tape<f32>;
pub type Weights64 = model::ModelWeights<f64>;
pub type Weights32 = model::ModelWeights<f32>;
