//! Fire and smoke detection toolkit: dataset preparation, anchor
//! clustering, detection post-processing, evaluation, temporal evidence
//! and alarm benchmarking.

pub mod alarm;
pub mod anchors;
pub mod config;
pub mod dataset;
pub mod detect;
pub mod eval;
pub mod geometry;
pub mod temporal;
