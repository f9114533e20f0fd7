//! Camera-invariant face anti-spoofing.
//!
//! High-frequency residual pre-processing feeds a pseudo-siamese pair of
//! residual trunks whose difference strips the camera fingerprint from the
//! spoofing feature; a second branch classifies a learned augmentation of
//! the raw image, and the two live-probabilities are fused. Test-time
//! unknown-camera detection can reweight the branches and refine the
//! camera feature with spatial self-attention.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experiments;
pub mod filters;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{RawImage, Tensor};
