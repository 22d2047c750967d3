//! Classification and heatmap losses, as plain functions and as fused tape ops.

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, CustomOp, Tape, Tensor, Var};

/// Predictions are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` inside the focal loss.
pub const PROB_CLAMP: f64 = 1e-6;

/// Smoothed target `y(1−ε) + ε/2`.
pub fn smooth_label(y: f64, eps: f64) -> f64 {
    y * (1.0 - eps) + eps / 2.0
}

/// `log(1 + eˣ)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Binary cross-entropy of `σ(logit)` against the smoothed label.
pub fn cls_loss(logit: f64, label: f64, eps: f64) -> f64 {
    // −[y'·log σ(x) + (1−y')·log(1−σ(x))] = softplus(x) − y'·x
    softplus(logit) - smooth_label(label, eps) * logit
}

fn focal_terms(p: f64, s: f64, alpha: f64, beta: f64) -> (f64, f64) {
    let clamped = !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p);
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let (value, slope) = if s == 1.0 {
        let q = 1.0 - p;
        (
            -q.powf(alpha) * p.ln(),
            alpha * q.powf(alpha - 1.0) * p.ln() - q.powf(alpha) / p,
        )
    } else {
        let w = (1.0 - s).powf(beta);
        let l = (1.0 - p).ln();
        (
            -w * p.powf(alpha) * l,
            -w * (alpha * p.powf(alpha - 1.0) * l - p.powf(alpha) / (1.0 - p)),
        )
    };
    (value, if clamped { 0.0 } else { slope })
}

/// Penalty-reduced focal loss between a predicted heatmap and its target,
/// normalized by the number of target cells equal to 1 (at least 1).
pub fn att_loss(pred: &[f64], target: &[f64], alpha: f64, beta: f64) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::shape(format!(
            "att_loss: {} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    let pos = target.iter().filter(|&&s| s == 1.0).count().max(1) as f64;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(&p, &s)| focal_terms(p, s, alpha, beta).0)
        .sum::<f64>()
        / pos)
}

/// `L_cls + λ·L_att` for one sample.
pub fn total_loss(logit: f64, label: f64, pred: &[f64], target: &[f64], cfg: &super::TrainConfig) -> Result<f64> {
    Ok(cls_loss(logit, label, cfg.label_smoothing) + cfg.lambda * att_loss(pred, target, cfg.focal_alpha, cfg.focal_beta)?)
}

struct BceMean {
    targets: Vec<f64>,
}

impl CustomOp for BceMean {
    fn name(&self) -> &'static str {
        "bce"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let x = inputs[0];
        let (g, n) = (grad.item(), self.targets.len() as f64);
        let d = x.data().iter().zip(&self.targets).map(|(&x, &y)| g * (sigmoid(x) - y) / n).collect();
        vec![Tensor::new(x.dims(), d).expect("same shape")]
    }
}

/// Mean smoothed BCE over a batch of logits.
pub fn cls_loss_tape(tape: &mut Tape, logits: Var, labels: &[f64], eps: f64) -> Result<Var> {
    let x = tape.value(logits);
    if x.numel() != labels.len() || labels.is_empty() {
        return Err(Error::shape(format!("{} logits for {} labels", x.numel(), labels.len())));
    }
    let targets: Vec<f64> = labels.iter().map(|&y| smooth_label(y, eps)).collect();
    let value = x.data().iter().zip(labels).map(|(&l, &y)| cls_loss(l, y, eps)).sum::<f64>() / labels.len() as f64;
    Ok(tape.custom(&[logits], Tensor::scalar(value), Box::new(BceMean { targets })))
}

struct FocalMean {
    targets: Vec<f64>,
    /// Cells per sample.
    cells: usize,
    alpha: f64,
    beta: f64,
}

impl FocalMean {
    fn positives(&self, b: usize) -> f64 {
        let t = &self.targets[b * self.cells..(b + 1) * self.cells];
        t.iter().filter(|&&s| s == 1.0).count().max(1) as f64
    }
}

impl CustomOp for FocalMean {
    fn name(&self) -> &'static str {
        "focal"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let p = inputs[0];
        let batch = self.targets.len() / self.cells;
        let g = grad.item() / batch as f64;
        let mut d = vec![0.0; p.numel()];
        for b in 0..batch {
            let scale = g / self.positives(b);
            for i in b * self.cells..(b + 1) * self.cells {
                d[i] = scale * focal_terms(p.data()[i], self.targets[i], self.alpha, self.beta).1;
            }
        }
        vec![Tensor::new(p.dims(), d).expect("same shape")]
    }
}

/// Mean over the batch of per-sample focal losses. `heatmaps` has a leading
/// batch axis; `targets` holds the samples' target cells back to back.
pub fn att_loss_tape(tape: &mut Tape, heatmaps: Var, targets: &[f64], alpha: f64, beta: f64) -> Result<Var> {
    let p = tape.value(heatmaps);
    let batch = p.dims()[0];
    if p.numel() != targets.len() || batch == 0 {
        return Err(Error::shape(format!(
            "att_loss: {} predicted cells for {} targets",
            p.numel(),
            targets.len()
        )));
    }
    let cells = p.numel() / batch;
    let mut value = 0.0;
    for b in 0..batch {
        let r = b * cells..(b + 1) * cells;
        value += att_loss(&p.data()[r.clone()], &targets[r], alpha, beta)?;
    }
    value /= batch as f64;
    let op = FocalMean {
        targets: targets.to_vec(),
        cells,
        alpha,
        beta,
    };
    Ok(tape.custom(&[heatmaps], Tensor::scalar(value), Box::new(op)))
}
