//! 3D volumetric classification on a frozen 2D transformer backbone:
//! low-rank task plugins, permutation-invariant slice fusion, optional
//! auxiliary segmentation supervision, attention heatmaps, and Platt
//! calibration.

pub mod auxseg;
pub mod backbone;
pub mod error;
pub mod fusion;
pub mod interpret;
pub mod io;
pub mod lora;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{AmcError, Result};
