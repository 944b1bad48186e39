//! Weakly supervised object classification and localization.
//!
//! The pipeline trains a multi-scale fully-convolutional proposal network
//! from image-level labels via log-sum-exp pooling, then verifies the
//! proposed boxes with cascaded classifiers (chains or trees) trained by
//! random proposal sampling. Evaluation reports per-class classification AP
//! and point-based localization AP with a pixel tolerance. Everything runs
//! in double precision on the CPU and is deterministic under a fixed seed.

pub mod cascade;
pub mod config;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fsio;
pub mod geometry;
pub mod image;
pub mod loss;
pub mod net;
pub mod pooling;
pub mod proposal;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
