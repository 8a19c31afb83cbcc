//! Temporal feature aggregation for cine-sequence segmentation.
//!
//! Frames are turned into feature maps, neighbouring frames' features are
//! warped onto the target frame along Horn–Schunck optical flow, weighted by
//! per-pixel cosine similarity and summed before the segmentation head of a
//! U-shaped network.

// Validation uses `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops mirror the stencil and layout arithmetic in numeric kernels.
#![allow(clippy::needless_range_loop)]

pub mod aggregation;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod tensor;

pub use error::{Error, Result};
