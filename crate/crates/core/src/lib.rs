//! Numerics for joint semantic segmentation and monocular depth estimation.
//!
//! A multi-branch convolutional network predicts per-pixel semantic logits and a
//! distribution over depth bins. Training minimizes `lambda * L_sem + L_depth`, where
//! the depth term is the scale-invariant log loss on the bin expectation. Semantic
//! predictions are refined by a fully-connected CRF whose pairwise kernels look at
//! position, colour and the *estimated* depth, solved by unrolled mean-field updates
//! that are differentiable with respect to the unaries and the CRF weights.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, the CLI and image IO live
//! in the companion `jointseg` crate.
#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod crf;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod net;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
pub use grid::{DepthMap, Grid, LabelMap, IGNORE_LABEL};
