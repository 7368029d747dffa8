//! Adam with L2 or decoupled weight decay, and global-norm gradient clipping.

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    /// L2 penalty folded into the gradient before the moment updates.
    pub weight_decay: f64,
    /// Decoupled (AdamW) decay: `param -= lr * decoupled_weight_decay * param`
    /// alongside the Adam update, independent of the gradient scale.
    pub decoupled_weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.0,
            decoupled_weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one tensor per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.rows(), p.cols()))
                .collect()
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update. `weight_decay` is folded into the
/// gradient (`g + weight_decay * param`) before the moment updates;
/// `decoupled_weight_decay` shrinks the parameter directly.
///
/// # Panics
/// If `params`, `grads` and the state disagree in count or shape.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, cfg: &AdamConfig) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.step += 1;
    let t = state.step as f64;
    let bias1 = 1.0 - cfg.beta1.powf(t);
    let bias2 = 1.0 - cfg.beta2.powf(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        assert_eq!(p.shape(), g.shape());
        let p = p.data_mut();
        let (m, v) = (m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g.data()[i] + cfg.weight_decay * p[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            p[i] -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.decoupled_weight_decay * p[i]);
        }
    }
}

/// Adds the L2 penalty gradient `weight_decay * param` to every gradient.
/// Use this instead of [`AdamConfig::weight_decay`] when the penalty has to
/// pass through gradient clipping together with the loss gradient.
///
/// # Panics
/// If `grads` and `params` disagree in count or shape.
pub fn add_weight_decay(grads: &mut [Tensor], params: &[Tensor], weight_decay: f64) {
    assert_eq!(grads.len(), params.len());
    for (g, p) in grads.iter_mut().zip(params) {
        assert_eq!(g.shape(), p.shape());
        g.add_scaled(weight_decay, p);
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::squared_norm).sum::<f64>().sqrt()
}

/// Rescales all gradients by `threshold / norm` when their global L2 norm
/// exceeds `threshold`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Tensor], threshold: f64) -> f64 {
    debug_assert!(threshold > 0.0);
    let norm = global_norm(grads);
    if norm > threshold {
        let factor = threshold / norm;
        for g in grads.iter_mut() {
            g.scale_in_place(factor);
        }
    }
    norm
}
