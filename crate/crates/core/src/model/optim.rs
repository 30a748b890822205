use super::objective::ObjectiveConfig;
use super::segmenter::Segmenter;
use crate::error::{Error, Result};

/// `base_lr * (1 - iter/max_iters)^power`.
pub fn poly_lr(base_lr: f64, iter: usize, max_iters: usize, power: f64) -> f64 {
    if max_iters == 0 {
        return 0.0;
    }
    let frac = 1.0 - iter as f64 / max_iters as f64;
    base_lr * frac.max(0.0).powf(power)
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub velocity: Segmenter,
}

impl SgdState {
    pub fn new(params: &Segmenter) -> Self {
        Self {
            velocity: params.zeros_like(),
        }
    }
}

/// One SGD step with momentum and decoupled weight decay on weight matrices:
///
/// `v = momentum * v + g`; `theta -= lr * (v + wd * theta)` (wd on weights only).
///
/// Returns the learning rate used.
pub fn sgd_step(
    params: &mut Segmenter,
    grads: &Segmenter,
    state: &mut SgdState,
    iter: usize,
    cfg: &ObjectiveConfig,
) -> Result<f64> {
    if iter >= cfg.max_iters {
        return Err(Error::invalid(format!(
            "iteration {iter} is past max_iters {}",
            cfg.max_iters
        )));
    }
    let lr = poly_lr(cfg.base_lr, iter, cfg.max_iters, cfg.poly_power);
    let params_t = params.tensors_mut();
    let grads_t = grads.tensors();
    let vel_t = state.velocity.tensors_mut();
    for (((name, p), (_, g)), (_, v)) in params_t.into_iter().zip(grads_t).zip(vel_t) {
        let decay = if Segmenter::is_weight(name) { cfg.weight_decay } else { 0.0 };
        p.expect_shape(g.shape())?;
        for ((pi, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = cfg.momentum * *vi + gi;
            *pi -= lr * (*vi + decay * *pi);
        }
    }
    Ok(lr)
}
