//! Desk-scale semi-supervised multi-task network for ultrasound nodule
//! segmentation, built on a self-contained reverse-mode autodiff substrate.
//!
//! The crate is organized bottom-up:
//! - [`autodiff`]: tensors, the gradient tape, Adam, cosine LR, FD checking
//! - [`data`]: dataset ingestion, augmentations, synthetic phantoms
//! - [`model`]: hybrid encoder, query-based dual decoder, auxiliary heads
//! - [`train`]: losses, the two training phases, checkpoints
//! - [`eval`]: segmentation metrics and batch evaluation
//!
//! The `examples/` directory exercises each capability end to end; the `ssmt`
//! binary wraps the same entry points as subcommands.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod model;
pub mod rng;
pub mod train;

pub use error::{Result, SsmtError};
