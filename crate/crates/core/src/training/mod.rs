//! Objective, optimizer, augmentation and the epoch loop over mixed
//! real/pseudo-fake batches.

mod augment;
mod data;
mod fit;
mod loss;
mod optim;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthesis::{SynthMode, SynthParams};
use crate::vulnerability::{Aggregate, DEFAULT_SIGMA};

pub use augment::{augment, crop_resize, gaussian_blur, gaussian_noise, jpeg_like, AugmentConfig};
pub use data::{build_batch, synthesize, toy_corpus, validation_samples, CorpusItem, Frame, TrainSample};
pub use fit::{train, EpochRecord, TrainOutcome};
pub use loss::{att_loss, att_loss_tape, cls_loss, cls_loss_tape, smooth_label, total_loss, PROB_CLAMP};
pub use optim::{lr_at, AdamW, AdamWConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Joint L2 bound on each step's gradients; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Weight λ of the heatmap term.
    pub lambda: f64,
    pub label_smoothing: f64,
    pub focal_alpha: f64,
    pub focal_beta: f64,
    /// Epochs during which only the classification head and L2-Att train.
    pub freeze_epochs: usize,
    /// Frames drawn per corpus item and epoch.
    pub frames_per_video: usize,
    pub synth_mode: SynthMode,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Not serialized: run configurations carry synthesis parameters in their
    /// own section and copy them here.
    #[serde(skip)]
    pub synth: SynthParams,
    /// Patch aggregate and Gaussian width used for the target heatmaps.
    pub aggregate: Aggregate,
    pub sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            base_lr: 5e-5,
            weight_decay: 1e-4,
            grad_clip: Some(1.0),
            lambda: 10.0,
            label_smoothing: 0.1,
            focal_alpha: 2.0,
            focal_beta: 4.0,
            freeze_epochs: 2,
            frames_per_video: 1,
            synth_mode: SynthMode::Sbi,
            seed: 0,
            augment: AugmentConfig::default(),
            synth: SynthParams::default(),
            aggregate: Aggregate::Max,
            sigma: DEFAULT_SIGMA,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lambda >= 0.0) {
            return fail(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(0.0..0.5).contains(&self.label_smoothing) {
            return fail(format!("label_smoothing must lie in [0, 0.5), got {}", self.label_smoothing));
        }
        if self.frames_per_video == 0 {
            return fail("frames_per_video must be at least 1".into());
        }
        if self.epochs == 0 || self.freeze_epochs >= self.epochs {
            return fail(format!(
                "freeze_epochs ({}) must be below epochs ({})",
                self.freeze_epochs, self.epochs
            ));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.base_lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return fail("base_lr and weight_decay must be non-negative".into());
        }
        if !(self.focal_alpha >= 1.0) || !(self.focal_beta >= 1.0) {
            return fail("focal_alpha and focal_beta must be >= 1".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return fail(format!("grad_clip must be positive, got {c}"));
            }
        }
        if !(self.sigma > 0.0) {
            return fail(format!("sigma must be positive, got {}", self.sigma));
        }
        for p in self.augment.probabilities() {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("augmentation probability {p} outside [0, 1]"));
            }
        }
        Ok(())
    }
}
