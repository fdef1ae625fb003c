//! Uncertainty-guided synthetic-view augmentation for visual place recognition.

pub mod augment;
pub mod backbone;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod nn;
pub mod pipeline;
pub mod raster;
pub mod renderer;
pub mod training;
pub mod ue_net;

pub use error::{Error, Result};
