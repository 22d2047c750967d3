//! Deepfake detection with a vision transformer trained on
//! blending-based pseudo-fakes, supervised to attend to the patches where
//! blending artifacts concentrate.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: tensors, reverse-mode autodiff, gradient checks.
//! - [`synthesis`]: images, landmarks, hull masks, self- and cross-blending.
//! - [`vulnerability`]: vulnerable patches and Gaussian target heatmaps.
//! - [`model`]: the transformer, its local-attention heatmap head, weights I/O.
//! - [`training`]: the combined objective, AdamW, schedule and epoch loop.
//! - [`evaluation`]: AUC/AP, video-level scores, SSIM strata, perturbations.
//! - [`verify`]: the oracle suite behind `fakeformer verify`.

pub mod error;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod synthesis;
pub mod training;
pub mod verify;
pub mod vulnerability;

pub use error::{Error, Result};
