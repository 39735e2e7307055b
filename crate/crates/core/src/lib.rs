//! Flash-flood susceptibility modeling on raster factor stacks.
//!
//! The crate is organized bottom-up:
//!
//! - [`engine`] — dense 4-D tensors with reverse-mode autodiff, the numeric
//!   substrate everything else runs on;
//! - [`cbam`] — the convolutional block attention module (channel + spatial);
//! - [`backbones`] — desk-scale ResNet / DenseNet / Xception classifiers with
//!   configurable attention placement;
//! - [`data`] — raster stack I/O, flood inventories, patch datasets, and a
//!   synthetic watershed generator;
//! - [`factors`] — conditioning-factor screening (Pearson, VIF);
//! - [`train`] / [`eval`] — the training protocol and evaluation metrics;
//! - [`sensitivity`] — jackknife factor importance;
//! - [`mapping`] — whole-grid susceptibility maps and natural-breaks classes.

pub mod backbones;
pub mod cbam;
pub mod data;
pub mod engine;
pub mod error;
pub mod eval;
pub mod factors;
pub mod mapping;
pub mod sensitivity;
pub mod train;

pub use error::{Error, Result};
