//! Experiment runner: configuration, stage pipeline and run manifest.

pub mod config;
pub mod manifest;
pub mod pipeline;
