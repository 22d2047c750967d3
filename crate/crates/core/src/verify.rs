//! Self-check suite: finite-difference gradient checks for every tape op and
//! for the full training objective, plus exact oracles for patch selection,
//! target heatmaps, blending and the metrics.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::evaluation::{auc, average_precision, ssim, Label, ScoredSample};
use crate::model::{forward_tape, is_buffer, patch_matrix, init_params, Mode, ModelConfig, ParamVars};
use crate::numerics::{gradient_check, GradCheckOptions, Tape, Tensor, Var};
use crate::synthesis::{blend, blending_boundary, BlendMask, BoundaryMap, Image, Map};
use crate::training::{att_loss_tape, cls_loss_tape, TrainConfig};
use crate::vulnerability::{ground_truth_heatmap, ground_truth_heatmap_sized, vulnerable_patches, Aggregate, PatchCoord, TargetSource};

pub const OP_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub group: &'static str,
    pub name: String,
    /// Largest error observed over all seeds or cases.
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    /// One line per check.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            s.push_str(&format!(
                "{} {:<8} {:<24} max_err={:.3e} tol={:.1e}{}\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.group,
                c.name,
                c.max_error,
                c.tolerance,
                if c.detail.is_empty() { String::new() } else { format!("  {}", c.detail) }
            ));
        }
        let failed = self.failures().count();
        s.push_str(&format!("{} checks, {failed} failed\n", self.checks.len()));
        s
    }
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub seeds: u64,
    /// Random instances per oracle check.
    pub cases: usize,
    /// Op whose backward rule is deliberately corrupted (for testing the suite).
    pub fault: Option<String>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seeds: 5,
            cases: 500,
            fault: None,
        }
    }
}

pub fn run(opts: &VerifyOptions) -> Result<VerifyReport> {
    let mut checks = op_gradient_checks(opts)?;
    checks.push(model_gradient_check(opts)?);
    checks.extend(oracle_checks(opts)?);
    Ok(VerifyReport { checks })
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct OpCase {
    name: &'static str,
    dims: Vec<Vec<usize>>,
    f: OpFn,
}

fn case(name: &'static str, dims: &[&[usize]], f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> OpCase {
    OpCase {
        name,
        dims: dims.iter().map(|d| d.to_vec()).collect(),
        f: Box::new(f),
    }
}

/// `Σ y ⊙ W` for a fixed pseudo-random `W`, so every output coordinate gets a
/// distinct upstream gradient.
fn project(tape: &mut Tape, y: Var) -> Result<Var> {
    let dims = tape.value(y).dims().to_vec();
    let mut k = 0usize;
    let w = Tensor::from_fn(&dims, |_| {
        k += 1;
        ((k as f64) * 0.7548776662).fract() * 2.0 - 1.0
    });
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn op_cases() -> Vec<OpCase> {
    vec![
        case("add", &[&[3, 4], &[3, 4]], |t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y)
        }),
        case("sub", &[&[3, 4], &[3, 4]], |t, v| {
            let y = t.sub(v[0], v[1])?;
            project(t, y)
        }),
        case("mul", &[&[3, 4], &[3, 4]], |t, v| {
            let y = t.mul(v[0], v[1])?;
            project(t, y)
        }),
        case("add_scalar", &[&[5]], |t, v| {
            let y = t.add_scalar(v[0], 0.3);
            let y = t.mul(y, y)?;
            project(t, y)
        }),
        case("mul_scalar", &[&[5]], |t, v| {
            let y = t.mul_scalar(v[0], -1.7);
            project(t, y)
        }),
        case("add_row", &[&[3, 4], &[4]], |t, v| {
            let y = t.add_row(v[0], v[1])?;
            let y = t.mul(y, y)?;
            project(t, y)
        }),
        case("matmul", &[&[3, 4], &[4, 5]], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y)
        }),
        case("matmul_batched", &[&[2, 3, 4], &[2, 4, 2]], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y)
        }),
        case("transpose", &[&[2, 3, 4]], |t, v| {
            let y = t.transpose(v[0])?;
            project(t, y)
        }),
        case("permute", &[&[2, 3, 4]], |t, v| {
            let y = t.permute(v[0], &[2, 0, 1])?;
            project(t, y)
        }),
        case("reshape", &[&[3, 4]], |t, v| {
            let y = t.reshape(v[0], &[2, 6])?;
            project(t, y)
        }),
        case("concat", &[&[2, 3], &[2, 2]], |t, v| {
            let y = t.concat(&[v[0], v[1]], 1)?;
            project(t, y)
        }),
        case("stack", &[&[2, 3], &[2, 3]], |t, v| {
            let y = t.stack(&[v[0], v[1]])?;
            project(t, y)
        }),
        case("slice", &[&[4, 5]], |t, v| {
            let y = t.slice(v[0], 1, 1, 3)?;
            project(t, y)
        }),
        case("sum", &[&[3, 4]], |t, v| {
            let y = t.mul(v[0], v[0])?;
            Ok(t.sum(y))
        }),
        case("mean", &[&[3, 4]], |t, v| {
            let y = t.mul(v[0], v[0])?;
            Ok(t.mean(y))
        }),
        case("softmax", &[&[3, 5]], |t, v| {
            let y = t.softmax(v[0], 1)?;
            project(t, y)
        }),
        case("layer_norm", &[&[3, 6], &[6], &[6]], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-6)?;
            project(t, y)
        }),
        case("gelu", &[&[3, 4]], |t, v| {
            let y = t.gelu(v[0]);
            project(t, y)
        }),
        case("sigmoid", &[&[3, 4]], |t, v| {
            let y = t.sigmoid(v[0]);
            project(t, y)
        }),
        case("conv2d", &[&[2, 5, 5], &[3, 2, 3, 3], &[3]], |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 1)?;
            project(t, y)
        }),
        case("batch_norm", &[&[2, 3, 2, 2], &[3], &[3]], |t, v| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], 1e-5)?;
            project(t, y)
        }),
        case("batch_norm_eval", &[&[2, 3, 2, 2], &[3], &[3]], |t, v| {
            let y = t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 0.8], 1e-5)?;
            project(t, y)
        }),
        case("bce", &[&[4, 1]], |t, v| cls_loss_tape(t, v[0], &[1.0, 0.0, 0.0, 1.0], 0.1)),
        case("focal", &[&[2, 1, 3, 3]], |t, v| {
            let p = t.sigmoid(v[0]);
            let targets = [0.0, 0.2, 0.5, 0.1, 1.0, 0.3, 0.0, 0.0, 0.6, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
            att_loss_tape(t, p, &targets, 2.0, 4.0)
        }),
        case("relu", &[&[3, 4]], |t, v| {
            let y = t.relu(v[0]);
            project(t, y)
        }),
    ]
}

fn random_inputs(c: &OpCase, seed: u64) -> Vec<Tensor> {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    c.dims
        .iter()
        .map(|d| {
            // Magnitudes stay clear of the relu kink at 0.
            Tensor::from_fn(d, |_| {
                let m: f64 = r.random_range(0.1..1.5);
                if r.random::<bool>() { m } else { -m }
            })
        })
        .collect()
}

/// Central-difference checks of every differentiable op at [`OP_TOL`].
pub fn op_gradient_checks(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for c in op_cases() {
        let mut worst: f64 = 0.0;
        for seed in 0..opts.seeds {
            let inputs = random_inputs(&c, seed);
            let g = GradCheckOptions {
                tol: OP_TOL,
                seed,
                fault: opts.fault.clone(),
                ..GradCheckOptions::default()
            };
            let rep = gradient_check(|t, v| (c.f)(t, v), &inputs, &g)?;
            worst = worst.max(rep.max_rel_error);
        }
        out.push(Check {
            group: "gradient",
            name: c.name.to_string(),
            max_error: worst,
            tolerance: OP_TOL,
            passed: worst <= OP_TOL,
            detail: format!("{} seeds", opts.seeds),
        });
    }
    Ok(out)
}

/// Configuration of the small model used for the end-to-end check.
pub fn check_model_config() -> ModelConfig {
    ModelConfig {
        height: 8,
        width: 8,
        patch: 4,
        depth: 2,
        dim: 8,
        mlp_dim: 16,
        heads: 2,
        att_hidden: 4,
        seed: 0,
    }
}

/// Gradient of `L_cls + λ·L_att` with respect to every learnable tensor of a
/// small model, on a real/fake pair, at [`MODEL_TOL`].
pub fn model_gradient_check(opts: &VerifyOptions) -> Result<Check> {
    let cfg = check_model_config();
    let tc = TrainConfig::default();
    let mut worst: f64 = 0.0;
    for seed in 0..opts.seeds {
        let params = init_params(&cfg, seed)?;
        // Larger weights than the init so every path carries signal.
        let inputs: Vec<Tensor> = params
            .iter()
            .filter(|(n, _)| !is_buffer(n))
            .enumerate()
            .map(|(i, (_, t))| {
                let mut r = ChaCha8Rng::seed_from_u64(seed * 1000 + i as u64);
                Tensor::from_fn(t.dims(), |j| t.data()[j] + r.random_range(-0.3..0.3))
            })
            .collect();
        let mut r = ChaCha8Rng::seed_from_u64(seed + 77);
        let imgs: Vec<Image> = (0..2).map(|_| Image::from_fn(8, 8, |_, _, _| r.random())).collect();
        let refs: Vec<&Image> = imgs.iter().collect();
        let patches = patch_matrix(&refs, &cfg)?;
        let targets = [0.0, 0.0, 0.0, 0.0, 1.0, 0.6, 0.6, 0.4];
        let params = &params;
        let f = |t: &mut Tape, v: &[Var]| -> Result<Var> {
            let vars = ParamVars::from_vars(params, v)?;
            let p = t.constant(patches.clone());
            let out = forward_tape(t, params, &vars, p, Mode::Train)?;
            let cls = cls_loss_tape(t, out.logits, &[0.0, 1.0], tc.label_smoothing)?;
            let att = att_loss_tape(t, out.heatmaps, &targets, tc.focal_alpha, tc.focal_beta)?;
            let att = t.mul_scalar(att, tc.lambda);
            t.add(cls, att)
        };
        let g = GradCheckOptions {
            tol: MODEL_TOL,
            seed,
            fault: opts.fault.clone(),
            ..GradCheckOptions::default()
        };
        let rep = gradient_check(f, &inputs, &g)?;
        worst = worst.max(rep.max_rel_error);
    }
    Ok(Check {
        group: "gradient",
        name: "total_loss(model)".into(),
        max_error: worst,
        tolerance: MODEL_TOL,
        passed: worst <= MODEL_TOL,
        detail: format!("{} seeds, 8x8 input, P=4, 2 blocks", opts.seeds),
    })
}

fn exhaustive_patches(m: &Map, patch: usize, mode: Aggregate) -> BTreeSet<PatchCoord> {
    let g = m.height() / patch;
    let mut best = f64::NEG_INFINITY;
    let mut scores = Vec::new();
    for gy in 0..g {
        for gx in 0..g {
            let mut vals = Vec::new();
            for r in 0..patch {
                for c in 0..patch {
                    vals.push(m.get(gy * patch + r, gx * patch + c));
                }
            }
            let s = match mode {
                Aggregate::Max => vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                Aggregate::Mean => vals.iter().sum::<f64>() / vals.len() as f64,
            };
            best = best.max(s);
            scores.push((PatchCoord::new(gx, gy), s));
        }
    }
    if best <= 0.0 {
        return BTreeSet::new();
    }
    scores.into_iter().filter(|(_, s)| best - s <= 1e-12).map(|(p, _)| p).collect()
}

/// Random boundary map; every third one copies its top-left block into two
/// other blocks so the maximum is tied.
fn random_boundary(r: &mut ChaCha8Rng, i: usize, side: usize, patch: usize) -> BoundaryMap {
    let mut data: Vec<f64> = (0..side * side).map(|_| r.random::<f64>()).collect();
    if i % 3 == 0 {
        let g = side / patch;
        let mut best = (0, 0, f64::NEG_INFINITY);
        for gy in 0..g {
            for gx in 0..g {
                let s = (0..patch * patch)
                    .map(|k| data[(gy * patch + k / patch) * side + gx * patch + k % patch])
                    .fold(f64::NEG_INFINITY, f64::max);
                if s > best.2 {
                    best = (gx, gy, s);
                }
            }
        }
        let targets = [(g - 1, 0), (0, g - 1)];
        for (tx, ty) in targets {
            for k in 0..patch * patch {
                let (dr, dc) = (k / patch, k % patch);
                data[(ty * patch + dr) * side + tx * patch + dc] = data[(best.1 * patch + dr) * side + best.0 * patch + dc];
            }
        }
    }
    BoundaryMap::from_map(Map::new(side, side, data).expect("square map")).expect("non-negative")
}

fn bool_check(group: &'static str, name: &str, failures: usize, cases: usize) -> Check {
    Check {
        group,
        name: name.into(),
        max_error: failures as f64,
        tolerance: 0.0,
        passed: failures == 0,
        detail: format!("{failures}/{cases} cases mismatched"),
    }
}

/// Exact oracles for patch selection, target heatmaps, blending identities
/// and metrics.
pub fn oracle_checks(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let mut r = ChaCha8Rng::seed_from_u64(0x0ac1e);
    let (side, patch) = (32, 4);

    let mut bad = 0;
    for i in 0..opts.cases {
        let b = random_boundary(&mut r, i, side, patch);
        let mode = if i % 2 == 0 { Aggregate::Max } else { Aggregate::Mean };
        if vulnerable_patches(&b, patch, mode)?.0 != exhaustive_patches(b.map(), patch, mode) {
            bad += 1;
        }
    }
    out.push(bool_check("oracle", "vulnerable_patches", bad, opts.cases));

    let mut bad = 0;
    for i in 0..opts.cases {
        let b = random_boundary(&mut r, i, side, patch);
        let s = ground_truth_heatmap(TargetSource::Fake(&b), patch, Aggregate::Max, 1.0)?;
        let expect = exhaustive_patches(b.map(), patch, Aggregate::Max);
        let argmax: BTreeSet<PatchCoord> = s.argmax().into_iter().collect();
        let scale = r.random_range(0.01..100.0);
        let scaled = BoundaryMap::from_map(b.map().map(|v| v * scale))?;
        let s2 = ground_truth_heatmap(TargetSource::Fake(&scaled), patch, Aggregate::Max, 1.0)?;
        let real = ground_truth_heatmap_sized(TargetSource::Real, side / patch, patch, Aggregate::Max, 1.0)?;
        if s.max() != 1.0 || argmax != expect || s2.argmax() != s.argmax() || !real.is_zero() {
            bad += 1;
        }
    }
    out.push(bool_check("oracle", "heatmap_law", bad, opts.cases));

    let mut bad = 0;
    let mut worst_sym: f64 = 0.0;
    for _ in 0..opts.cases.min(100) {
        let fg = Image::from_fn(16, 16, |_, _, _| r.random());
        let bg = Image::from_fn(16, 16, |_, _, _| r.random());
        let ones = blend(&fg, &bg, &BlendMask::filled(16, 16, 1.0))?;
        let zeros = blend(&fg, &bg, &BlendMask::filled(16, 16, 0.0))?;
        let half = blending_boundary(&BlendMask::filled(16, 16, 0.5));
        if ones != fg || zeros != bg || half.data().iter().any(|&v| v != 1.0) {
            bad += 1;
        }
        let m = Map::from_fn(16, 16, |_, _| r.random());
        let b1 = blending_boundary(&BlendMask::new(m.clone()));
        let b2 = blending_boundary(&BlendMask::new(m.map(|v| 1.0 - v)));
        for (a, b) in b1.data().iter().zip(b2.data()) {
            worst_sym = worst_sym.max((a - b).abs());
        }
    }
    out.push(bool_check("oracle", "blend_identities", bad, opts.cases.min(100)));
    out.push(Check {
        group: "oracle",
        name: "boundary_symmetry".into(),
        max_error: worst_sym,
        tolerance: 1e-12,
        passed: worst_sym <= 1e-12,
        detail: String::new(),
    });

    let mut bad = 0;
    let n_auc = opts.cases.max(1000);
    for _ in 0..n_auc {
        let n = r.random_range(2..40);
        let mut samples: Vec<ScoredSample> = (0..n)
            .map(|i| {
                let score = (r.random_range(0..8) as f64) / 8.0;
                let label = if r.random::<bool>() { Label::Fake } else { Label::Real };
                ScoredSample::new(score, label, format!("s{i}"))
            })
            .collect();
        samples[0].label = Label::Fake;
        samples[1].label = Label::Real;
        let (mut wins2, mut pairs) = (0u64, 0u64);
        for p in samples.iter().filter(|s| s.label.is_fake()) {
            for q in samples.iter().filter(|s| !s.label.is_fake()) {
                pairs += 1;
                wins2 += match p.score.partial_cmp(&q.score) {
                    Some(std::cmp::Ordering::Greater) => 2,
                    Some(std::cmp::Ordering::Equal) => 1,
                    _ => 0,
                };
            }
        }
        if auc(&samples)? != wins2 as f64 / (2 * pairs) as f64 {
            bad += 1;
        }
    }
    out.push(bool_check("metric", "auc_pair_count", bad, n_auc));

    let lab = |l: &[u8], s: &[f64]| -> Vec<ScoredSample> {
        l.iter()
            .zip(s)
            .enumerate()
            .map(|(i, (&l, &s))| ScoredSample::new(s, if l == 1 { Label::Fake } else { Label::Real }, format!("a{i}")))
            .collect()
    };
    let ap1 = average_precision(&lab(&[1, 0, 1], &[0.9, 0.8, 0.7]))?;
    let n = 10;
    let mut labels = vec![0u8; n];
    labels[n - 1] = 1;
    let scores: Vec<f64> = (0..n).map(|i| 1.0 - i as f64 / n as f64).collect();
    let ap2 = average_precision(&lab(&labels, &scores))?;
    let ap_err = (ap1 - 5.0 / 6.0).abs().max((ap2 - 1.0 / n as f64).abs());
    out.push(Check {
        group: "metric",
        name: "average_precision".into(),
        max_error: ap_err,
        tolerance: 1e-12,
        passed: ap_err <= 1e-12,
        detail: "5/6 and 1/n cases".into(),
    });

    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let x = Image::from_fn(24, 24, |_, _, _| r.random());
        worst = worst.max((ssim(&x, &x)? - 1.0).abs());
    }
    out.push(Check {
        group: "metric",
        name: "ssim_identity".into(),
        max_error: worst,
        tolerance: 1e-12,
        passed: worst <= 1e-12,
        detail: String::new(),
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_suite_passes() {
        let rep = run(&VerifyOptions {
            seeds: 2,
            cases: 60,
            fault: None,
        })
        .unwrap();
        assert!(rep.passed(), "{}", rep.to_text());
        let names: Vec<&str> = rep.checks.iter().map(|c| c.name.as_str()).collect();
        for op in ["matmul", "softmax", "layer_norm", "conv2d", "batch_norm", "focal", "total_loss(model)"] {
            assert!(names.contains(&op), "{op} missing");
        }
    }

    #[test]
    fn injected_fault_is_named() {
        let opts = VerifyOptions {
            seeds: 1,
            cases: 10,
            fault: Some("softmax".into()),
        };
        let failed: Vec<String> = op_gradient_checks(&opts).unwrap().into_iter().filter(|c| !c.passed).map(|c| c.name).collect();
        assert_eq!(failed, ["softmax"]);
        assert!(!model_gradient_check(&opts).unwrap().passed);
    }
}
