//! Inference engine, losses, data pipeline and evaluation for a
//! landmark-augmented single-stage face detector.

pub mod archive;
pub mod blocks;
pub mod data;
pub mod error;
pub mod eval;
pub mod head;
pub mod loss;
pub mod model;
pub mod ops;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
