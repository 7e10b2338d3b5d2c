//! Adam with a step-decay learning-rate schedule.
//!
//! Bias-corrected first and second moments; the decay multiplies the base
//! rate by `factor` once per listed epoch boundary (1-based epochs, the
//! drop applies to epochs strictly after the boundary). Non-trainable
//! parameters (batch-norm running statistics) are never touched.

use crate::graph::{Graph, ParamId};
use crate::math;
use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Epochs after which the rate drops, e.g. `[15, 20]`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            decay_epochs: vec![15, 20],
            decay_factor: 0.1,
        }
    }
}

#[derive(Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    epoch: usize,
    targets: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    /// Binds to the graph's current trainable parameter set.
    pub fn new(graph: &Graph, cfg: AdamConfig) -> Adam {
        let targets = graph.trainable_param_ids();
        let m = targets.iter().map(|&id| vec![0.0; graph.param(id).value().numel()]).collect();
        let v = targets.iter().map(|&id| vec![0.0; graph.param(id).value().numel()]).collect();
        Adam { cfg, step: 0, epoch: 1, targets, m, v }
    }

    /// Sets the current 1-based epoch for the rate schedule.
    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch.max(1);
    }

    pub fn effective_lr(&self) -> f64 {
        let drops = self.cfg.decay_epochs.iter().filter(|&&d| self.epoch > d).count();
        self.cfg.lr * math::powi(self.cfg.decay_factor, drops as i32)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update from the gradients currently on the parameters.
    /// Parameters whose grad buffer was never allocated are skipped.
    pub fn step(&mut self, graph: &mut Graph) {
        self.step += 1;
        let lr = self.effective_lr();
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - math::powi(b1, self.step as i32);
        let bc2 = 1.0 - math::powi(b2, self.step as i32);
        for (slot, &pid) in self.targets.iter().enumerate() {
            let entry = graph.param_mut(pid);
            let Some(grad) = entry.value().grad() else { continue };
            let grad = grad.to_vec();
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            let data = entry.value_mut().data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * mhat / (math::sqrt(vhat) + self.cfg.epsilon);
            }
        }
    }
}
