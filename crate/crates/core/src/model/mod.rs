//! The detector: patch embedding, pre-norm transformer encoder, a linear
//! classification head on the class token and the L2-Att heatmap head on the
//! patch tokens.

mod forward;
mod weights;

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng;
use crate::synthesis::CHANNELS;

pub use forward::{
    attention, classify, encoder_block, forward, forward_batch, forward_tape, l2att_forward, patch_embed,
    patch_matrix, ForwardVars, Mode, ModelOutput, ParamVars, LN_EPS,
};
pub use weights::{load_params, load_params_with, read_fkf1, save_params, write_fkf1, FKF1_MAGIC, FKF1_VERSION};

/// Standard deviation of the truncated-normal initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub depth: usize,
    pub dim: usize,
    pub mlp_dim: usize,
    pub heads: usize,
    /// Channels of the L2-Att 3×3 conv.
    pub att_hidden: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl ModelConfig {
    /// Desk-scale model for 64×64 inputs.
    pub fn tiny() -> Self {
        Self {
            height: 64,
            width: 64,
            patch: 8,
            depth: 4,
            dim: 64,
            mlp_dim: 256,
            heads: 4,
            att_hidden: 32,
            seed: 0,
        }
    }

    pub fn fakeformer_s() -> Self {
        Self {
            height: 112,
            width: 112,
            patch: 8,
            depth: 12,
            dim: 384,
            mlp_dim: 1536,
            heads: 6,
            att_hidden: 192,
            seed: 0,
        }
    }

    pub fn fakeformer_b() -> Self {
        Self {
            height: 224,
            width: 224,
            patch: 16,
            depth: 12,
            dim: 768,
            mlp_dim: 3072,
            heads: 12,
            att_hidden: 384,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if [self.height, self.width, self.patch, self.depth, self.dim, self.mlp_dim, self.heads, self.att_hidden]
            .contains(&0)
        {
            return bad("model sizes must be positive".into());
        }
        if !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return bad(format!(
                "patch {} does not divide {}×{}",
                self.patch, self.height, self.width
            ));
        }
        if self.height != self.width {
            return bad("the patch grid must be square (height == width)".into());
        }
        if !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        Ok(())
    }

    /// √N.
    pub fn grid_side(&self) -> usize {
        self.height / self.patch
    }

    /// N.
    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// N + 1.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_len(&self) -> usize {
        CHANNELS * self.patch * self.patch
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Every tensor of the model in a fixed order, with its shape.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, m, h) = (self.dim, self.mlp_dim, self.att_hidden);
        let mut out: Vec<(String, Vec<usize>)> = vec![
            ("patch_embed.weight".into(), vec![self.patch_len(), d]),
            ("cls_token".into(), vec![d]),
            ("pos_embed".into(), vec![self.tokens(), d]),
        ];
        for i in 0..self.depth {
            let p = |s: &str| format!("blocks.{i}.{s}");
            out.push((p("norm1.weight"), vec![d]));
            out.push((p("norm1.bias"), vec![d]));
            for proj in ["q", "k", "v", "proj"] {
                out.push((p(&format!("attn.{proj}.weight")), vec![d, d]));
                out.push((p(&format!("attn.{proj}.bias")), vec![d]));
            }
            out.push((p("norm2.weight"), vec![d]));
            out.push((p("norm2.bias"), vec![d]));
            out.push((p("mlp.fc1.weight"), vec![d, m]));
            out.push((p("mlp.fc1.bias"), vec![m]));
            out.push((p("mlp.fc2.weight"), vec![m, d]));
            out.push((p("mlp.fc2.bias"), vec![d]));
        }
        out.push(("norm.weight".into(), vec![d]));
        out.push(("norm.bias".into(), vec![d]));
        out.push(("head.weight".into(), vec![d, 1]));
        out.push(("head.bias".into(), vec![1]));
        for (conv, bn, cin, cout, k) in [("conv1", "bn1", d, h, 3), ("conv2", "bn2", h, 1, 1)] {
            out.push((format!("l2att.{conv}.weight"), vec![cout, cin, k, k]));
            out.push((format!("l2att.{conv}.bias"), vec![cout]));
            for s in ["weight", "bias", "running_mean", "running_var"] {
                out.push((format!("l2att.{bn}.{s}"), vec![cout]));
            }
        }
        out
    }

    /// Multiply-accumulate count of one forward pass (matmuls and convs only).
    pub fn flops(&self) -> u64 {
        let (n, t, d, m) = (self.num_patches(), self.tokens(), self.dim, self.mlp_dim);
        let s = self.grid_side();
        let embed = n * self.patch_len() * d;
        let block = 4 * t * d * d + 2 * t * t * d + 2 * t * d * m;
        let att = s * s * (d * self.att_hidden * 9 + self.att_hidden);
        (embed + self.depth * block + d + att) as u64
    }
}

/// True for running batch-norm statistics, which are state rather than parameters.
pub fn is_buffer(name: &str) -> bool {
    name.ends_with("running_mean") || name.ends_with("running_var")
}

/// True for tensors frozen during the warm-up epochs: everything except the
/// classification head and the L2-Att head.
pub fn is_backbone(name: &str) -> bool {
    !(name.starts_with("head.") || name.starts_with("l2att."))
}

/// Named model tensors in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ModelParams {
    /// All-zero weights, unit LN/BN scales and unit running variances.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (names, tensors) = config
            .layout()
            .into_iter()
            .map(|(name, dims)| {
                let unit = name.ends_with("running_var")
                    || (name.ends_with(".weight") && (name.contains("norm") || name.contains(".bn")));
                let t = if unit { Tensor::ones(&dims) } else { Tensor::zeros(&dims) };
                (name, t)
            })
            .unzip();
        Ok(Self::from_named(config.clone(), names, tensors))
    }

    fn from_named(config: ModelConfig, names: Vec<String>, tensors: Vec<Tensor>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self {
            config,
            names,
            tensors,
            index,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index_of(name)
            .map(|i| &self.tensors[i])
            .ok_or_else(|| Error::Data(format!("no model tensor named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let i = self
            .index_of(name)
            .ok_or_else(|| Error::Data(format!("no model tensor named {name}")))?;
        Ok(&mut self.tensors[i])
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    /// Replaces a tensor, checking its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.dims() != value.dims() {
            return Err(Error::shape(format!(
                "{name}: expected shape {:?}, got {:?}",
                slot.dims(),
                value.dims()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// Learnable scalar count (running statistics excluded).
    pub fn num_parameters(&self) -> usize {
        self.iter().filter(|(n, _)| !is_buffer(n)).map(|(_, t)| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

fn truncated_normal(rng: &mut rng::Rng, std: f64) -> f64 {
    let normal = Normal::new(0.0, std).expect("positive std");
    loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            return v;
        }
    }
}

/// Truncated-normal(0, 0.02) embeddings and weights, zero biases, unit
/// LN/BN scales. Each tensor draws from its own stream so the layout can grow
/// without reshuffling earlier tensors.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(config)?;
    for (i, name) in params.names.clone().iter().enumerate() {
        let random = name == "cls_token"
            || name == "pos_embed"
            || (name.ends_with(".weight") && !name.contains("norm") && !name.contains(".bn"));
        if !random {
            continue;
        }
        let mut r = rng::stream(seed, &[0x1417, i as u64]);
        // Burn one draw so streams for adjacent indices diverge immediately.
        let _: u64 = r.random();
        for v in params.tensors[i].data_mut() {
            *v = truncated_normal(&mut r, INIT_STD);
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for c in [ModelConfig::tiny(), ModelConfig::fakeformer_s(), ModelConfig::fakeformer_b()] {
            c.validate().unwrap();
        }
        let s = ModelConfig::fakeformer_s();
        assert_eq!(s.num_patches(), 196);
        assert_eq!(s.tokens(), 197);
        assert_eq!(s.grid_side(), 14);
        let mut bad = ModelConfig::tiny();
        bad.heads = 3;
        assert!(bad.validate().is_err());
        bad = ModelConfig::tiny();
        bad.patch = 7;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn fakeformer_s_parameter_count() {
        let p = ModelParams::zeros(&ModelConfig::fakeformer_s()).unwrap();
        let n = p.num_parameters() as f64;
        assert!((n / 22.77e6 - 1.0).abs() <= 0.05, "{n}");
        assert!(ModelConfig::fakeformer_s().flops() > 1_000_000_000);
    }

    #[test]
    fn init_is_seeded_and_well_formed() {
        let c = ModelConfig::tiny();
        let a = init_params(&c, 3).unwrap();
        assert_eq!(a, init_params(&c, 3).unwrap());
        assert_ne!(a, init_params(&c, 4).unwrap());
        for (name, t) in a.iter() {
            if name.contains("norm") && name.ends_with(".weight") {
                assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
            }
            if name.ends_with(".bias") || name.ends_with("running_mean") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
            if !name.contains("norm") && !name.contains(".bn") && !name.ends_with("running_var") {
                assert!(t.data().iter().all(|v| v.abs() <= 2.0 * INIT_STD + 1e-15), "{name}");
            }
        }
    }

    #[test]
    fn init_weight_statistics_at_d384() {
        let p = init_params(&ModelConfig::fakeformer_s(), 0).unwrap();
        let w = p.get("blocks.0.attn.q.weight").unwrap();
        let n = w.numel() as f64;
        let mean = w.data().iter().sum::<f64>() / n;
        let sd = (w.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() <= 0.01, "{mean}");
        // A ±2σ truncated normal has sd ≈ 0.88σ.
        assert!((sd / INIT_STD - 0.88).abs() < 0.02, "{sd}");
    }

    #[test]
    fn backbone_split() {
        assert!(is_backbone("blocks.3.mlp.fc1.weight"));
        assert!(is_backbone("pos_embed"));
        assert!(is_backbone("norm.weight"));
        assert!(!is_backbone("head.weight"));
        assert!(!is_backbone("l2att.bn1.running_var"));
        assert!(is_buffer("l2att.bn1.running_var"));
    }
}
