//! Dense `f64` tensors, a reverse-mode autodiff tape and finite-difference
//! gradient checking.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{gradient_check, relative_error, GradCheckEntry, GradCheckOptions, GradCheckReport};
pub use tape::{BatchStats, CustomOp, Gradients, Tape, Var};
pub use tensor::{max_pool_patches, Tensor};

pub(crate) use tape::sigmoid;

/// Momentum applied to the previous running statistic in batch norm.
pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

/// Folds batch statistics into running statistics:
/// `running = momentum·running + (1−momentum)·batch`, using the unbiased
/// batch variance.
pub fn update_running_stats(running_mean: &mut [f64], running_var: &mut [f64], stats: &BatchStats) {
    let correction = if stats.count > 1 {
        stats.count as f64 / (stats.count - 1) as f64
    } else {
        1.0
    };
    for (r, m) in running_mean.iter_mut().zip(&stats.mean) {
        *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
    }
    for (r, v) in running_var.iter_mut().zip(&stats.var) {
        *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v * correction;
    }
}
