//! Unsupervised self-training change detection for co-registered bitemporal
//! optical images.
//!
//! The pipeline runs in three stages:
//!
//! 1. **Pre-detection**: a classical difference image ([`classical::cva`]) is
//!    binarized with Otsu's threshold into a first pseudo label, and the
//!    neighborhood agreement filter ([`conf_filter`]) turns that label into a
//!    per-pixel confidence map.
//! 2. **Teacher**: a composite-branch encoder/decoder ([`network`]) is trained
//!    on the first pseudo label with confidence-weighted cross-entropy, then
//!    predicts a second pseudo label.
//! 3. **Student**: a freshly initialized network of the same architecture is
//!    trained on a weighted mix of both pseudo labels and produces the final
//!    change map.
//!
//! No reference labels enter training; [`metrics`] is only used for evaluation.

pub mod classical;
pub mod cli;
pub mod conf_filter;
pub mod config;
pub mod error;
pub mod metrics;
pub mod network;
pub mod raster;
pub mod selftrain;
pub mod synth;
pub mod tensor;
pub mod threshold;

pub use error::{Error, Result};
pub use raster::{ChangeMap, RasterImage, ScalarMap};
