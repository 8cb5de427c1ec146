//! Robust inverse design under input and output noise.
//!
//! The crate provides a small reverse-mode autodiff engine over dense
//! matrices, MLP regressors, a conditional affine-coupling flow trained with a
//! per-sample weighted likelihood, k-fold robustness weights, synthetic
//! benchmark simulators with noise wrappers and Monte-Carlo evaluation.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod flow;
pub mod graph;
pub mod io;
pub mod matrix;
pub mod nn;
pub mod seed;
pub mod stats;
pub mod tasks;
pub mod weights;

pub use dataset::{Dataset, Provenance};
pub use error::{Error, Result};
pub use matrix::Matrix;
