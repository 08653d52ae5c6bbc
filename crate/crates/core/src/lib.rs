//! Semi-supervised salt-body segmentation.
//!
//! An attention-augmented U-Net (scSE blocks, feature pyramid attention,
//! hypercolumn head) trained with a BCE warm-up followed by the Lovász
//! hinge under cyclic cosine annealing, snapshot ensembling, and several
//! rounds of ensemble self-training on unlabeled patches.

pub mod cli;
pub mod data;
pub mod error;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod self_training;
pub mod trainer;

pub use error::{Error, Result};
