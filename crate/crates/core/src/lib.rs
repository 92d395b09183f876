//! Unsupervised pose-feature learning from videos.
//!
//! The pipeline mines appearance/flow triplets from video clips, trains a
//! three-stream network to decide whether a motion block explains an
//! appearance change, and transfers the learned appearance features to
//! heatmap-based pose estimation and action recognition. Everything runs on
//! the small reverse-mode autodiff engine in [`tensor`]; dense optical flow
//! comes from the coarse-to-fine solver in [`flow`]; the synthetic
//! articulated-figure corpus in [`corpus`] stands in for real video datasets.

pub mod cli;
pub mod corpus;
pub mod flow;
pub mod metrics;
pub mod nets;
pub mod sampler;
pub mod tensor;
pub mod trainer;
pub mod viz;
