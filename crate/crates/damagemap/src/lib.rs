//! Typology-based building damage mapping from bitemporal satellite imagery.
//!
//! The crate trains and runs a Siamese change-detection segmentation model on
//! aligned pre/post-disaster image pairs and produces per-pixel 5-class damage
//! masks (background plus four damage typologies). It is organized around the
//! stages of that pipeline:
//!
//! - [`schema`]: the damage-class taxonomy, triplet data model, and
//!   frequency-derived class weights.
//! - [`tensor`]: a small reverse-mode autodiff tape over `ndarray`, with the
//!   convolution / normalization / attention kernels the model needs.
//! - [`model`]: the hierarchical Siamese encoder-decoder with multi-scale
//!   difference blocks.
//! - [`losses`]: per-class Dice + cross-entropy and the weighted composite
//!   objective.
//! - [`metrics`]: confusion-matrix accumulation, per-class/macro reporting,
//!   multi-run aggregation, and report/plot export.
//! - [`datapipe`]: triplet discovery, tiling, normalization, augmentation,
//!   splits, and minority upsampling.
//! - [`trainer`]: Adam with linear LR decay, early stopping, checkpointing,
//!   multi-seed orchestration.
//! - [`inference`]: tiled whole-scene prediction and overlay rendering.
//! - [`synthgen`]: deterministic synthetic triplet generation for desk-scale
//!   training and end-to-end validation.
//! - [`cli`]: the `damagemap` command-line entry point.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datapipe;
pub mod error;
pub mod inference;
pub mod losses;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod schema;
pub mod svgplot;
pub mod synthgen;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
