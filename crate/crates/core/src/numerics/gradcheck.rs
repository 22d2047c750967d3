//! Central finite-difference checks of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Gradients smaller than this are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Tensors with more coordinates than this are checked on a random sample of this size.
    pub max_coords: usize,
    pub seed: u64,
    #[doc(hidden)]
    pub fault: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            max_coords: 64,
            seed: 0,
            fault: None,
        }
    }
}

impl GradCheckOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub input: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| e.rel_error > self.tol)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Compares the tape gradient of the scalar function `f` against central
/// differences `(f(θ+h) − f(θ−h)) / 2h` for every input coordinate.
///
/// `f` must be deterministic. All `inputs` are treated as differentiable.
pub fn gradient_check<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    if let Some(op) = &opts.fault {
        tape.inject_fault(op.clone());
    }
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut entries = Vec::new();
    let mut perturbed: Vec<Tensor> = inputs.to_vec();
    for (idx, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = if n > opts.max_coords {
            let mut c = sample(&mut rng, n, opts.max_coords).into_vec();
            c.sort_unstable();
            c
        } else {
            (0..n).collect()
        };
        for coord in coords {
            let analytic = grads.get(vars[idx]).map_or(0.0, |g| g.data()[coord]);
            let base = input.data()[coord];
            perturbed[idx].data_mut()[coord] = base + opts.h;
            let plus = evaluate(&f, &perturbed)?;
            perturbed[idx].data_mut()[coord] = base - opts.h;
            let minus = evaluate(&f, &perturbed)?;
            perturbed[idx].data_mut()[coord] = base;
            let numeric = (plus - minus) / (2.0 * opts.h);
            entries.push(GradCheckEntry {
                input: idx,
                coord,
                analytic,
                numeric,
                rel_error: relative_error(analytic, numeric),
            });
        }
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        entries,
        max_rel_error,
        tol: opts.tol,
    })
}
