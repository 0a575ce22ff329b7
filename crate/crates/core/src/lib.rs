//! Multi-task person detection and body-fat-percentage regression.
//!
//! The crate is organised bottom-up:
//!
//! * [`engine`]: reverse-mode automatic differentiation over [`Tensor`]s.
//! * [`architecture`]: the Darknet-53 style backbone, three detection heads
//!   and the body-fat regression branch.
//! * [`loss`]: the multi-part detection objective plus the body-fat term.
//! * [`postprocess`]: box decoding, IoU and non-maximum suppression.
//! * [`training`]: initialization, learning-rate schedule, Adam, checkpoints
//!   and the training loop.
//! * [`data`]: the synthetic silhouette dataset, manifests and BMI-stratified
//!   splitting.
//! * [`evalstats`]: error metrics, t confidence intervals, Tukey HSD and
//!   report rendering.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod architecture;
pub mod data;
pub mod engine;
mod error;
pub mod evalstats;
pub mod loss;
pub mod postprocess;
pub mod rng;
mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
