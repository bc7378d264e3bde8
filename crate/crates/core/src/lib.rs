//! Two-stage whole-slide Gleason grading at desk scale: a pluggable patch
//! classifier with calibration and hard-example-mining sampling, kNN
//! grade-group classification, fine-grained pattern interpolation, and the
//! agreement/survival statistics used to evaluate the system.
//!
//! Modules follow the pipeline: [`model`] holds the shared domain types,
//! [`stage1`] classifies patches, [`sampler`] drives training-patch
//! selection, [`stage2`] grades slides from heatmaps, [`finegrained`]
//! interpolates between patterns, and [`metrics`]/[`survival`] evaluate
//! the results.

pub mod finegrained;
pub mod metrics;
pub mod model;
pub mod sampler;
pub mod stage1;
pub mod stage2;
pub mod survival;
