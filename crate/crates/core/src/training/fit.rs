//! The epoch loop.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{auc, ScoredSample};
use crate::model::{forward_batch, forward_tape, init_params, is_backbone, patch_matrix, Mode, ModelConfig, ModelParams, ParamVars};
use crate::numerics::{update_running_stats, Tape, Tensor};
use crate::rng;

use super::data::{build_batch, validation_samples, CorpusItem, TrainSample};
use super::loss::{att_loss_tape, cls_loss_tape};
use super::optim::{lr_at, AdamW, AdamWConfig};
use super::TrainConfig;

/// One line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate at the epoch's first step.
    pub lr: f64,
    /// Sample-weighted means over the epoch's batches.
    pub cls_loss: f64,
    pub att_loss: f64,
    pub total_loss: f64,
    pub val_auc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
}

struct StepLoss {
    cls: f64,
    att: f64,
}

fn step(params: &mut ModelParams, opt: &mut AdamW, batch: &[&TrainSample], cfg: &TrainConfig, frozen: bool, lr: f64) -> Result<StepLoss> {
    let mcfg = params.config().clone();
    let mut tape = Tape::new();
    let vars = ParamVars::bind(&mut tape, params, |name| !(frozen && is_backbone(name)));
    let images: Vec<_> = batch.iter().map(|s| &s.image).collect();
    let patches = tape.constant(patch_matrix(&images, &mcfg)?);
    let out = forward_tape(&mut tape, params, &vars, patches, Mode::Train)?;
    let labels: Vec<f64> = batch.iter().map(|s| s.label.as_f64()).collect();
    let targets: Vec<f64> = batch.iter().flat_map(|s| s.target.data().iter().copied()).collect();
    let cls = cls_loss_tape(&mut tape, out.logits, &labels, cfg.label_smoothing)?;
    let att = att_loss_tape(&mut tape, out.heatmaps, &targets, cfg.focal_alpha, cfg.focal_beta)?;
    let weighted = tape.mul_scalar(att, cfg.lambda);
    let total = tape.add(cls, weighted)?;
    let loss = StepLoss {
        cls: tape.value(cls).item(),
        att: tape.value(att).item(),
    };
    if !(loss.cls.is_finite() && loss.att.is_finite()) {
        return Err(Error::Data("non-finite training loss".into()));
    }
    let mut grads = tape.backward(total)?;
    let mut updates = Vec::new();
    for (i, v) in vars.iter() {
        if !tape.requires_grad(v) {
            continue;
        }
        let g = grads
            .take(v)
            .ok_or_else(|| Error::Data(format!("no gradient for {}", params.names()[i])))?;
        updates.push((i, g));
    }
    if let Some(max) = cfg.grad_clip {
        clip_global_norm(&mut updates, max);
    }
    for (i, g) in &updates {
        opt.step(*i, params.tensor_mut(*i), g, lr)?;
    }
    for (prefix, stats) in &out.bn_stats {
        let mi = params.index_of(&format!("{prefix}.running_mean")).expect("layout has running mean");
        let vi = params.index_of(&format!("{prefix}.running_var")).expect("layout has running var");
        let mut rm = params.tensors()[mi].clone();
        update_running_stats(rm.data_mut(), params.tensor_mut(vi).data_mut(), stats);
        *params.tensor_mut(mi) = rm;
    }
    Ok(loss)
}

/// Rescales the gradients so their joint L2 norm is at most `max`.
fn clip_global_norm(grads: &mut [(usize, Tensor)], max: f64) {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max {
        let scale = max / norm;
        for (_, g) in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
}

/// Frame-level AUC of the model on fixed validation samples.
fn validate(params: &ModelParams, samples: &[TrainSample], chunk: usize) -> Result<f64> {
    let mut scored = Vec::with_capacity(samples.len());
    for part in samples.chunks(chunk.max(1)) {
        let images: Vec<_> = part.iter().map(|s| &s.image).collect();
        for (s, o) in part.iter().zip(forward_batch(params, &images)?) {
            scored.push(ScoredSample::new(o.score(), s.label, s.source_id.clone()));
        }
    }
    auc(&scored)
}

/// Trains a freshly initialized model (seeded by `model.seed`) on pseudo-fakes
/// synthesized from `train_items`. The backbone stays fixed for the first
/// `freeze_epochs`. `observer` sees every epoch's record and weights, which
/// is where callers log or checkpoint.
pub fn train(
    train_items: &[CorpusItem],
    val_items: &[CorpusItem],
    model: &ModelConfig,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&EpochRecord, &ModelParams) -> Result<()>,
) -> Result<TrainOutcome> {
    model.validate()?;
    cfg.validate()?;
    if train_items.is_empty() {
        return Err(Error::Data("empty training corpus".into()));
    }
    let mut params = init_params(model, model.seed)?;
    let val = if val_items.is_empty() {
        Vec::new()
    } else {
        validation_samples(val_items, cfg, model.patch)?
    };
    let per_epoch = 2 * cfg.frames_per_video * train_items.len();
    let steps_per_epoch = per_epoch.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        params.len(),
    );
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut global = 0;
    for epoch in 0..cfg.epochs {
        let samples = build_batch(train_items, epoch as u64, cfg, model.patch)?;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &[0x5f1e, epoch as u64]));
        let frozen = epoch < cfg.freeze_epochs;
        let first_lr = lr_at(global, total_steps, cfg.base_lr)?;
        let (mut cls, mut att) = (0.0, 0.0);
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainSample> = idx.iter().map(|&i| &samples[i]).collect();
            let lr = lr_at(global, total_steps, cfg.base_lr)?;
            let l = step(&mut params, &mut opt, &batch, cfg, frozen, lr)?;
            cls += l.cls * batch.len() as f64;
            att += l.att * batch.len() as f64;
            global += 1;
        }
        let n = samples.len() as f64;
        let (cls, att) = (cls / n, att / n);
        let record = EpochRecord {
            epoch,
            lr: first_lr,
            cls_loss: cls,
            att_loss: att,
            total_loss: cls + cfg.lambda * att,
            val_auc: if val.is_empty() {
                None
            } else {
                Some(validate(&params, &val, cfg.batch_size.max(32))?)
            },
        };
        observer(&record, &params)?;
        history.push(record);
    }
    Ok(TrainOutcome { params, history })
}
