//! Prompt-conditioned no-reference image quality assessment.

pub mod augmentation;
pub mod autograd;
pub mod config;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod image;
pub mod model;
pub mod nn;
pub mod registry;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
