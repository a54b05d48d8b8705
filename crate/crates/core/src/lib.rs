//! Whole-slide-image triage engine.
//!
//! A slide raster flows through tissue segmentation and tiling, stain
//! adaptation to a reference appearance, region-of-interest selection, and a
//! small classifier queried repeatedly under random hidden-unit masks. The
//! mean per-class sigmoid over those repetitions gives a confidence score,
//! which is thresholded at levels calibrated ahead of time to target
//! accuracies. Slides are aggregated to specimens by maximum confidence.

#![allow(clippy::needless_range_loop)]

pub mod adaptation;
pub mod aggregation;
pub mod classifier;
pub mod cli;
pub mod confidence;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod image;
pub mod label;
pub mod manifest;
pub mod models;
pub mod output;
pub mod pipeline;
pub mod roi;
pub mod seed;
pub mod synth;
pub mod tiling;
pub mod workflow;

pub use error::{Error, Result};
pub use label::{ClassLabel, N_CLASSES};
