//! AdamW and the plateau-then-linear-decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// Per-tensor first and second moments. A tensor's step count advances only
/// when it receives an update, so frozen tensors start fresh when thawed.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    state: Vec<Option<Moments>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, tensors: usize) -> Self {
        Self {
            config,
            state: vec![None; tensors],
        }
    }

    /// Updates tensor `index` from its gradient: decoupled decay
    /// `θ ← θ − lr·wd·θ`, then the bias-corrected Adam step.
    pub fn step(&mut self, index: usize, param: &mut Tensor, grad: &Tensor, lr: f64) -> Result<()> {
        if param.dims() != grad.dims() {
            return Err(Error::shape(format!(
                "gradient shape {:?} does not match parameter {:?}",
                grad.dims(),
                param.dims()
            )));
        }
        let c = self.config;
        let st = self.state[index].get_or_insert_with(|| Moments {
            m: vec![0.0; param.numel()],
            v: vec![0.0; param.numel()],
            step: 0,
        });
        st.step += 1;
        let bc1 = 1.0 - c.beta1.powi(st.step as i32);
        let bc2 = 1.0 - c.beta2.powi(st.step as i32);
        for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(&mut st.m).zip(&mut st.v) {
            *p -= lr * c.weight_decay * *p;
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= lr * mhat / (vhat.sqrt() + c.eps);
        }
        Ok(())
    }

    /// Number of updates tensor `index` has received.
    pub fn steps(&self, index: usize) -> u64 {
        self.state[index].as_ref().map_or(0, |s| s.step)
    }
}

/// `base` for the first quarter of the steps, then linear decay reaching 0 at
/// the final step.
pub fn lr_at(step: usize, total: usize, base: f64) -> Result<f64> {
    if step >= total {
        return Err(Error::Config(format!("step {step} outside a schedule of {total} steps")));
    }
    let plateau = total / 4;
    if step < plateau {
        return Ok(base);
    }
    let ramp = total - 1 - plateau;
    if ramp == 0 {
        return Ok(0.0);
    }
    Ok(base * (total - 1 - step) as f64 / ramp as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_single_step_oracle() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, 1);
        let mut p = Tensor::scalar(0.7);
        opt.step(0, &mut p, &Tensor::scalar(1.0), 1e-3).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction.
        assert!((p.item() - (0.7 - 1e-3 / (1.0 + 1e-8))).abs() < 1e-12);
        assert_eq!(opt.steps(0), 1);
    }

    #[test]
    fn zero_gradients() {
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            1,
        );
        let mut p = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        opt.step(0, &mut p, &Tensor::zeros(&[3]), 0.1).unwrap();
        assert_eq!(p, before);

        let mut opt = AdamW::new(AdamWConfig::default(), 1);
        opt.step(0, &mut p, &Tensor::zeros(&[3]), 0.1).unwrap();
        for (a, b) in p.data().iter().zip(before.data()) {
            assert_eq!(*a, b - 0.1 * 1e-4 * b);
        }
        assert!(opt.step(0, &mut p, &Tensor::zeros(&[2]), 0.1).is_err());
    }

    #[test]
    fn schedule_shape() {
        let (t, base) = (1000, 5e-5);
        assert_eq!(lr_at(0, t, base).unwrap(), 5e-5);
        assert_eq!(lr_at(t / 4 - 1, t, base).unwrap(), 5e-5);
        assert_eq!(lr_at(t / 4, t, base).unwrap(), 5e-5);
        assert_eq!(lr_at(t - 1, t, base).unwrap(), 0.0);
        let mid = lr_at(5 * t / 8, t, base).unwrap();
        assert!((mid / base - 0.5).abs() <= 1.0 / t as f64, "{mid}");
        // Piecewise linear: constant differences on the ramp.
        let d: Vec<f64> = (t / 4..t - 1).map(|s| lr_at(s, t, base).unwrap() - lr_at(s + 1, t, base).unwrap()).collect();
        assert!(d.iter().all(|x| (x - d[0]).abs() < 1e-18));
        assert!(lr_at(t, t, base).is_err());
        assert_eq!(lr_at(0, 1, base).unwrap(), 0.0);
    }
}
