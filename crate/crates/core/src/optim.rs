//! Flat-vector optimizers and the learning-rate schedule. State lives in
//! [`ParamVector`]s sharing the model's layout so the engine can checkpoint
//! it alongside the parameters.

use std::sync::Arc;

use crate::param::{ParamLayout, ParamVector};

/// SGD with classical momentum and decoupled-from-nothing weight decay
/// folded into the gradient:
///
/// ```text
/// v <- momentum * v + g + weight_decay * p
/// p <- p - lr * v
/// ```
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: ParamVector,
}

impl SgdMomentum {
    pub fn new(layout: Arc<ParamLayout>, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: ParamVector::zeros(layout),
        }
    }

    pub fn step(&mut self, params: &mut ParamVector, grad: &ParamVector) {
        self.velocity.scale(self.momentum);
        self.velocity.axpy(1.0, grad);
        if self.weight_decay != 0.0 {
            self.velocity.axpy(self.weight_decay, params);
        }
        params.axpy(-self.lr, &self.velocity);
    }
}

/// Adam with the standard bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: ParamVector,
    pub v: ParamVector,
}

impl Adam {
    pub fn new(layout: Arc<ParamLayout>, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: ParamVector::zeros(layout.clone()),
            v: ParamVector::zeros(layout),
        }
    }

    pub fn step(&mut self, params: &mut ParamVector, grad: &ParamVector) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        for i in 0..params.len() {
            let g = grad.values[i];
            self.m.values[i] = b1 * self.m.values[i] + (1.0 - b1) * g;
            self.v.values[i] = b2 * self.v.values[i] + (1.0 - b2) * g * g;
            let mhat = self.m.values[i] / (1.0 - b1.powi(self.t as i32));
            let vhat = self.v.values[i] / (1.0 - b2.powi(self.t as i32));
            params.values[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Half-cosine decay from `lr0` at `epoch = 0` to zero at `epoch = total`.
pub fn cosine_lr(epoch: usize, total: usize, lr0: f64) -> f64 {
    assert!(total > 0, "schedule length must be positive");
    let e = epoch.min(total) as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * e / total as f64).cos())
}
