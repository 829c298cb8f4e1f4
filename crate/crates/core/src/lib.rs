//! Stein variational training of variational autoencoders.
//!
//! Decoder parameters and latent codes are represented by particle sets that
//! are transported with Stein variational gradient descent, while an
//! amortised recognition network `f_η(x, ξ)` learns to reproduce the
//! transported codes. The importance-weighted variant reweights `k`
//! independent particle groups, and a semi-supervised loop adds a label
//! decoder.

pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod harness;
pub mod iwsvgd;
pub mod kernels;
pub mod models;
pub mod nn;
pub mod recognition;
pub mod numcore;
pub mod svgd;
pub mod trainer;

pub use error::{Error, Result};
