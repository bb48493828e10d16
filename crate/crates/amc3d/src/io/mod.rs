//! File formats, dataset plumbing, synthetic data, and the task engine.

pub mod manifest;
pub mod plugin;
pub mod synth;
pub mod volume;
