use crate::error::{Error, Result};
use crate::numerics::{sigmoid, BatchStats, Tape, Tensor, Var, BN_EPS};
use crate::synthesis::{Image, CHANNELS};
use crate::vulnerability::{Heatmap, HeatmapRole};

use super::{is_buffer, ModelConfig, ModelParams};

pub const LN_EPS: f64 = 1e-6;

/// Batch-norm behaviour of the L2-Att head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; returned for the running-average update.
    Train,
    /// Stored running statistics.
    Eval,
}

/// Tape handles for the learnable tensors of a [`ModelParams`]. Running
/// statistics are read from the params directly.
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: Vec<Option<Var>>,
}

impl ParamVars {
    /// Puts every learnable tensor on the tape, as a gradient leaf when
    /// `trainable(name)` holds and as a constant otherwise.
    pub fn bind(tape: &mut Tape, params: &ModelParams, trainable: impl Fn(&str) -> bool) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| {
                if is_buffer(name) {
                    None
                } else if trainable(name) {
                    Some(tape.param(t.clone()))
                } else {
                    Some(tape.constant(t.clone()))
                }
            })
            .collect();
        Self { vars }
    }

    /// Uses existing vars, one per learnable tensor in layout order.
    pub fn from_vars(params: &ModelParams, vars: &[Var]) -> Result<Self> {
        let mut it = vars.iter();
        let out: Vec<Option<Var>> = params
            .names()
            .iter()
            .map(|n| if is_buffer(n) { None } else { it.next().copied() })
            .collect();
        let learnable = params.names().iter().filter(|n| !is_buffer(n)).count();
        if vars.len() != learnable {
            return Err(Error::shape(format!(
                "expected {learnable} parameter vars, got {}",
                vars.len()
            )));
        }
        Ok(Self { vars: out })
    }

    pub fn var(&self, params: &ModelParams, name: &str) -> Result<Var> {
        let i = params
            .index_of(name)
            .ok_or_else(|| Error::Data(format!("no model tensor named {name}")))?;
        self.vars[i].ok_or_else(|| Error::Data(format!("{name} is not a learnable tensor")))
    }

    /// `(tensor index, var)` for every bound tensor.
    pub fn iter(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.vars.iter().enumerate().filter_map(|(i, v)| v.map(|v| (i, v)))
    }
}

/// Handles produced by [`forward_tape`].
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// `[B, 1]` classification logits.
    pub logits: Var,
    /// `[B, 1, √N, √N]` heatmaps after the sigmoid.
    pub heatmaps: Var,
    /// Batch statistics per L2-Att batch-norm prefix (training mode only).
    pub bn_stats: Vec<(String, BatchStats)>,
}

/// Per-image result of an inference pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    pub logit: f64,
    pub heatmap: Heatmap,
}

impl ModelOutput {
    /// Fake probability ŷ.
    pub fn score(&self) -> f64 {
        sigmoid(self.logit)
    }
}

struct Ctx<'a> {
    params: &'a ModelParams,
    vars: &'a ParamVars,
}

impl Ctx<'_> {
    fn v(&self, name: &str) -> Result<Var> {
        self.vars.var(self.params, name)
    }

    fn cfg(&self) -> &ModelConfig {
        self.params.config()
    }

    /// `x[R, in] · W[in, out] + b`.
    fn linear(&self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        let y = tape.matmul(x, self.v(&format!("{prefix}.weight"))?)?;
        tape.add_row(y, self.v(&format!("{prefix}.bias"))?)
    }

    fn norm(&self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        let g = self.v(&format!("{prefix}.weight"))?;
        let b = self.v(&format!("{prefix}.bias"))?;
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Flattens images into a `[B·N, C·P²]` patch matrix: patches row-major over
/// the grid, each flattened channel-major then row-major.
pub fn patch_matrix(images: &[&Image], config: &ModelConfig) -> Result<Tensor> {
    let (p, side) = (config.patch, config.grid_side());
    let len = config.patch_len();
    let mut data = Vec::with_capacity(images.len() * config.num_patches() * len);
    for img in images {
        if img.height() != config.height || img.width() != config.width {
            return Err(Error::shape(format!(
                "image is {}×{}, model expects {}×{}",
                img.height(),
                img.width(),
                config.height,
                config.width
            )));
        }
        for gy in 0..side {
            for gx in 0..side {
                for c in 0..CHANNELS {
                    let plane = img.plane(c);
                    for r in 0..p {
                        let row = (gy * p + r) * img.width() + gx * p;
                        data.extend(plane[row..row + p].iter().map(|v| 2.0 * v - 1.0));
                    }
                }
            }
        }
    }
    Tensor::new(&[images.len() * config.num_patches(), len], data)
}

/// `z⁰ = [x_cls; x₁E; …; x_N E] + E_pos` for a `[B·N, C·P²]` patch matrix;
/// returns `[B, N+1, D]`.
pub fn patch_embed(tape: &mut Tape, params: &ModelParams, vars: &ParamVars, patches: Var) -> Result<Var> {
    let ctx = Ctx { params, vars };
    let cfg = ctx.cfg();
    let (n, d) = (cfg.num_patches(), cfg.dim);
    let rows = tape.value(patches).dims()[0];
    if !rows.is_multiple_of(n) {
        return Err(Error::shape(format!("{rows} patch rows are not a multiple of N = {n}")));
    }
    let batch = rows / n;
    let e = tape.matmul(patches, ctx.v("patch_embed.weight")?)?;
    let e = tape.reshape(e, &[batch, n, d])?;
    let cls = tape.reshape(ctx.v("cls_token")?, &[1, d])?;
    let ones = tape.constant(Tensor::ones(&[batch, 1]));
    let cls = tape.matmul(ones, cls)?;
    let cls = tape.reshape(cls, &[batch, 1, d])?;
    let z = tape.concat(&[cls, e], 1)?;
    let z = tape.reshape(z, &[batch, (n + 1) * d])?;
    let z = tape.add_row(z, ctx.v("pos_embed")?)?;
    tape.reshape(z, &[batch, n + 1, d])
}

/// Multi-head self-attention over `[B, T, D]` with the projections under
/// `prefix`; returns the output and the `[B·H, T, T]` attention weights.
pub fn attention(tape: &mut Tape, params: &ModelParams, vars: &ParamVars, x: Var, prefix: &str) -> Result<(Var, Var)> {
    let ctx = Ctx { params, vars };
    let &[b, t, d] = tape.value(x).dims() else {
        return Err(Error::shape("attention expects [B, T, D]"));
    };
    let h = ctx.cfg().heads;
    let dh = d / h;
    let flat = tape.reshape(x, &[b * t, d])?;
    let split = |tape: &mut Tape, name: &str| -> Result<Var> {
        let y = ctx.linear(tape, flat, &format!("{prefix}.{name}"))?;
        let y = tape.reshape(y, &[b, t, h, dh])?;
        let y = tape.permute(y, &[0, 2, 1, 3])?;
        tape.reshape(y, &[b * h, t, dh])
    };
    let q = split(tape, "q")?;
    let k = split(tape, "k")?;
    let v = split(tape, "v")?;
    let kt = tape.transpose(k)?;
    let s = tape.matmul(q, kt)?;
    let s = tape.mul_scalar(s, 1.0 / (dh as f64).sqrt());
    let a = tape.softmax(s, 2)?;
    let o = tape.matmul(a, v)?;
    let o = tape.reshape(o, &[b, h, t, dh])?;
    let o = tape.permute(o, &[0, 2, 1, 3])?;
    let o = tape.reshape(o, &[b * t, d])?;
    let o = ctx.linear(tape, o, &format!("{prefix}.proj"))?;
    Ok((tape.reshape(o, &[b, t, d])?, a))
}

/// Pre-norm block `i`: `z + MHSA(LN(z))`, then `z + MLP(LN(z))`.
pub fn encoder_block(tape: &mut Tape, params: &ModelParams, vars: &ParamVars, z: Var, i: usize) -> Result<Var> {
    let ctx = Ctx { params, vars };
    let p = format!("blocks.{i}");
    let dims = tape.value(z).dims().to_vec();
    let h = ctx.norm(tape, z, &format!("{p}.norm1"))?;
    let (a, _) = attention(tape, params, vars, h, &format!("{p}.attn"))?;
    let z = tape.add(z, a)?;
    let h = ctx.norm(tape, z, &format!("{p}.norm2"))?;
    let h = tape.reshape(h, &[dims[0] * dims[1], dims[2]])?;
    let h = ctx.linear(tape, h, &format!("{p}.mlp.fc1"))?;
    let h = tape.gelu(h);
    let h = ctx.linear(tape, h, &format!("{p}.mlp.fc2"))?;
    let h = tape.reshape(h, &dims)?;
    tape.add(z, h)
}

fn head(tape: &mut Tape, ctx: &Ctx<'_>, zn: Var) -> Result<Var> {
    let &[b, _, d] = tape.value(zn).dims() else {
        return Err(Error::shape("classification head expects [B, T, D]"));
    };
    let cls = tape.slice(zn, 1, 0, 1)?;
    let cls = tape.reshape(cls, &[b, d])?;
    ctx.linear(tape, cls, "head")
}

/// Final LN, then the linear head on the class token; `[B, 1]` logits.
pub fn classify(tape: &mut Tape, params: &ModelParams, vars: &ParamVars, z: Var) -> Result<Var> {
    let ctx = Ctx { params, vars };
    let zn = ctx.norm(tape, z, "norm")?;
    head(tape, &ctx, zn)
}

fn conv_each(tape: &mut Tape, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
    let dims = tape.value(x).dims().to_vec();
    let batch = dims[0];
    let mut outs = Vec::with_capacity(batch);
    for i in 0..batch {
        let xi = if batch == 1 { x } else { tape.slice(x, 0, i, 1)? };
        let xi = tape.reshape(xi, &dims[1..])?;
        outs.push(tape.conv2d(xi, w, b, pad)?);
    }
    tape.stack(&outs)
}

fn bn(
    tape: &mut Tape,
    ctx: &Ctx<'_>,
    x: Var,
    prefix: &str,
    mode: Mode,
    stats: &mut Vec<(String, BatchStats)>,
) -> Result<Var> {
    let g = ctx.v(&format!("{prefix}.weight"))?;
    let b = ctx.v(&format!("{prefix}.bias"))?;
    match mode {
        Mode::Train => {
            let (y, s) = tape.batch_norm(x, g, b, BN_EPS)?;
            stats.push((prefix.to_string(), s));
            Ok(y)
        }
        Mode::Eval => {
            let rm = ctx.params.get(&format!("{prefix}.running_mean"))?;
            let rv = ctx.params.get(&format!("{prefix}.running_var"))?;
            tape.batch_norm_eval(x, g, b, rm.data(), rv.data(), BN_EPS)
        }
    }
}

/// L2-Att head on `[B, N, D]` patch tokens: reshape to `D×√N×√N`, conv3×3 →
/// BN → ReLU, conv1×1 → BN, sigmoid. Returns `[B, 1, √N, √N]`.
pub fn l2att_forward(
    tape: &mut Tape,
    params: &ModelParams,
    vars: &ParamVars,
    tokens: Var,
    mode: Mode,
) -> Result<(Var, Vec<(String, BatchStats)>)> {
    let ctx = Ctx { params, vars };
    let &[b, n, d] = tape.value(tokens).dims() else {
        return Err(Error::shape("L2-Att expects [B, N, D] patch tokens"));
    };
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return Err(Error::shape(format!("{n} patches do not form a square grid")));
    }
    let mut stats = Vec::new();
    let f = tape.permute(tokens, &[0, 2, 1])?;
    let f = tape.reshape(f, &[b, d, side, side])?;
    let f = conv_each(tape, f, ctx.v("l2att.conv1.weight")?, ctx.v("l2att.conv1.bias")?, 1)?;
    let f = bn(tape, &ctx, f, "l2att.bn1", mode, &mut stats)?;
    let f = tape.relu(f);
    let f = conv_each(tape, f, ctx.v("l2att.conv2.weight")?, ctx.v("l2att.conv2.bias")?, 0)?;
    let f = bn(tape, &ctx, f, "l2att.bn2", mode, &mut stats)?;
    Ok((tape.sigmoid(f), stats))
}

/// Full forward pass over a `[B·N, C·P²]` patch matrix.
pub fn forward_tape(
    tape: &mut Tape,
    params: &ModelParams,
    vars: &ParamVars,
    patches: Var,
    mode: Mode,
) -> Result<ForwardVars> {
    let ctx = Ctx { params, vars };
    let cfg = params.config();
    let mut z = patch_embed(tape, params, vars, patches)?;
    for i in 0..cfg.depth {
        z = encoder_block(tape, params, vars, z, i)?;
    }
    let zn = ctx.norm(tape, z, "norm")?;
    let logits = head(tape, &ctx, zn)?;
    let tokens = tape.slice(zn, 1, 1, cfg.num_patches())?;
    let (heatmaps, bn_stats) = l2att_forward(tape, params, vars, tokens, mode)?;
    Ok(ForwardVars {
        logits,
        heatmaps,
        bn_stats,
    })
}

/// Inference on a batch of images with stored batch-norm statistics.
pub fn forward_batch(params: &ModelParams, images: &[&Image]) -> Result<Vec<ModelOutput>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let cfg = params.config();
    let mut tape = Tape::new();
    let vars = ParamVars::bind(&mut tape, params, |_| false);
    let patches = tape.constant(patch_matrix(images, cfg)?);
    let out = forward_tape(&mut tape, params, &vars, patches, Mode::Eval)?;
    let side = cfg.grid_side();
    let logits = tape.value(out.logits).data();
    let heat = tape.value(out.heatmaps).data();
    (0..images.len())
        .map(|i| {
            Ok(ModelOutput {
                logit: logits[i],
                heatmap: Heatmap::new(
                    side,
                    heat[i * side * side..(i + 1) * side * side].to_vec(),
                    HeatmapRole::Prediction,
                )?,
            })
        })
        .collect()
}

pub fn forward(params: &ModelParams, image: &Image) -> Result<ModelOutput> {
    Ok(forward_batch(params, &[image])?.remove(0))
}
