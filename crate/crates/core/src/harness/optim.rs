use std::collections::BTreeMap;
use std::f64::consts::PI;

use super::config::{LrScheduleConfig, OptimizerConfig};
use crate::model::Model;

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// AdamW with decoupled weight decay on matrices only. Parameters that
/// appear after training started join with zero moments and the global step
/// count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: &OptimizerConfig) -> Self {
        Self {
            beta1: cfg.betas[0],
            beta2: cfg.betas[1],
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn tracked(&self) -> usize {
        self.state.len()
    }

    /// First and second moments of a parameter, if tracked.
    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.state.get(name).map(|s| (s.m.as_slice(), s.v.as_slice()))
    }

    /// Starts tracking any model parameter not seen before.
    pub fn register(&mut self, model: &Model) {
        for (name, t) in model.params() {
            self.state.entry(name).or_insert_with(|| Moments {
                m: vec![0.0; t.numel()],
                v: vec![0.0; t.numel()],
            });
        }
    }

    /// Applies one update from the gradients stored on the model's tensors.
    pub fn step(&mut self, model: &mut Model, lr: f64) {
        self.register(model);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, p) in model.params_mut() {
            let decay = if p.shape().len() >= 2 { self.weight_decay } else { 0.0 };
            let Some(grad) = p.grad().map(<[f32]>::to_vec) else {
                continue;
            };
            let s = self.state.get_mut(&name).expect("registered above");
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let g = grad[i] as f64;
                s.m[i] = self.beta1 * s.m[i] + (1.0 - self.beta1) * g;
                s.v[i] = self.beta2 * s.v[i] + (1.0 - self.beta2) * g * g;
                let update = (s.m[i] / bc1) / ((s.v[i] / bc2).sqrt() + self.eps);
                let mut x = *w as f64;
                x -= lr * decay * x;
                x -= lr * update;
                *w = x as f32;
            }
        }
    }
}

/// Scales all stored gradients so their global L2 norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(model: &mut Model, max_norm: f64) -> f64 {
    let norm = model
        .params()
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flatten()
        .map(|g| (*g as f64) * (*g as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = (max_norm / (norm + 1e-12)) as f32;
        for (_, t) in model.params_mut() {
            if let Some(g) = t.grad() {
                let scaled: Vec<f32> = g.iter().map(|v| v * scale).collect();
                t.zero_grad();
                t.accumulate_grad(&scaled).expect("same length");
            }
        }
    }
    norm
}

/// Learning rate at iteration `it`: linear warmup, then cosine decay to
/// `min_lr` at the final iteration.
pub fn cosine_lr(cfg: &LrScheduleConfig, peak: f64, it: usize, steps_per_epoch: usize, epochs: usize) -> f64 {
    let total = (steps_per_epoch * epochs).max(1);
    let warmup = (cfg.warmup_epochs * steps_per_epoch).min(total);
    if it < warmup {
        return peak * (it + 1) as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1) as f64;
    let progress = ((it - warmup) as f64 / span).min(1.0);
    cfg.min_lr + 0.5 * (peak - cfg.min_lr) * (1.0 + (PI * progress).cos())
}
