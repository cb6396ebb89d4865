use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ModelParams;
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates, keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update. Parameters without a gradient are left
/// untouched.
pub fn adam_step(params: &mut ModelParams, grads: &BTreeMap<String, Tensor<f32>>, state: &mut AdamState, cfg: &AdamConfig) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads {
        let Some(p) = params.get_mut(name) else { continue };
        let n = p.len();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        for (i, (pi, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gi = gi as f64;
            let mi = cfg.beta1 * m[i] as f64 + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v[i] as f64 + (1.0 - cfg.beta2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let update = cfg.lr * (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps);
            *pi = (*pi as f64 - update) as f32;
        }
    }
}

/// Rescale gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor<f32>>, max_norm: f64) -> f64 {
    let norm = grads.values().flat_map(|g| g.data()).map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}
