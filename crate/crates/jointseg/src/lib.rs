//! File formats and command-line pipeline for joint segmentation and depth
//! estimation: PNG datasets, binary checkpoints, TOML configs, CRF weight CSVs and
//! metric reports around the numerics of `jointseg-core`.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod crf_io;
pub mod dataset;
pub mod error;
pub mod report;

pub use error::{Error, Result};
