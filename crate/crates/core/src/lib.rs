//! Few-shot 3D Gaussian head avatars.
//!
//! The crate covers the full pipeline: a parametric head model with linear
//! blendshapes and skinning, a UV-space encoder/decoder that emits one 3D
//! Gaussian per texel, a differentiable reference splat renderer, synthetic
//! multi-view training data, prior training, few-shot enrollment and driving.

pub mod conditioning;
pub mod container;
pub mod error;
pub mod generator;
pub mod head_model;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod render;
pub mod splat;
pub mod synthetic;

pub use error::{Error, Result};
