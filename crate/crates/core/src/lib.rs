//! Colour-bias unlearning for semantic segmentation.
//!
//! A segmentation network is split into a feature extractor `f`, a pixel-wise
//! segmentation head `g` and an adversarial head `h` that predicts quantised
//! pixel colours from `f`'s features through a gradient-reversal edge. Training
//! `f` against `h` strips colour information from the shared features. The
//! crate also ships the datasets, colour corruptions and IoU reporting needed
//! to measure robustness to colour shift.

pub mod datasets;
pub mod evaluate;
pub mod error;
pub mod metrics;
pub mod transforms;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
