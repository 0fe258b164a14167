//! Adam, gradient clipping and the reduce-on-plateau learning-rate schedule.

use crate::error::{arg_err, shape_err, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// Bias-corrected Adam state for every trainable parameter of a store.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Option<Vec<f64>>>,
    second: Vec<Option<Vec<f64>>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let buffers = || store.params().iter().map(|p| p.trainable.then(|| vec![0.0; p.value.numel()])).collect::<Vec<_>>();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first: buffers(), second: buffers() }
    }

    /// First-moment buffer of parameter `index`, if it is trainable.
    pub fn first_moment(&self, index: usize) -> Option<&[f64]> {
        self.first.get(index).and_then(|m| m.as_deref())
    }
}

/// One Adam update in place. `grads` is aligned with the store's parameters;
/// `None` entries (buffers) are skipped.
pub fn adam_step(store: &mut ParamStore, grads: &[Option<Tensor>], state: &mut AdamState) -> Result<()> {
    if grads.len() != store.len() || state.first.len() != store.len() {
        return shape_err(format!("adam_step: {} gradients for {} parameters", grads.len(), store.len()));
    }
    for (p, g) in store.params().iter().zip(grads) {
        if let Some(g) = g {
            if g.shape() != p.value.shape() {
                return shape_err(format!("adam_step: gradient of {} has shape {:?}", p.name, g.shape()));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for (i, p) in store.params_mut().iter_mut().enumerate() {
        let (Some(g), Some(m), Some(v)) = (&grads[i], &mut state.first[i], &mut state.second[i]) else {
            continue;
        };
        for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescale gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(Tensor::norm_sq).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

/// Multiplies the learning rate by `factor` once a maximised metric has not
/// improved by more than `min_delta` for more than `patience` epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub best_metric: f64,
    pub epochs_since_improvement: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize, min_delta: f64) -> Result<Self> {
        if !(factor > 0.0 && factor < 1.0) {
            return arg_err(format!("plateau factor {factor} must lie in (0, 1)"));
        }
        Ok(Self { factor, patience, min_delta, best_metric: f64::NEG_INFINITY, epochs_since_improvement: 0 })
    }

    /// Feed one epoch's metric; returns the learning rate for the next epoch.
    pub fn step(&mut self, metric: f64, current_lr: f64) -> f64 {
        if metric > self.best_metric + self.min_delta {
            self.best_metric = metric;
            self.epochs_since_improvement = 0;
            return current_lr;
        }
        self.epochs_since_improvement += 1;
        if self.epochs_since_improvement > self.patience {
            self.epochs_since_improvement = 0;
            return current_lr * self.factor;
        }
        current_lr
    }
}
