//! AdamW for network parameters, Adam for the loss weights, and the cosine schedule.

use crate::nn::{Module, Param};

/// Cosine annealing from `lr_init` to `lr_final` over `period` epochs, flat afterwards.
pub fn cosine_lr(epoch: usize, lr_init: f64, lr_final: f64, period: usize) -> f64 {
    let t = epoch.min(period) as f64 / period.max(1) as f64;
    lr_final + 0.5 * (lr_init - lr_final) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self { beta1, beta2, eps: 1e-8, weight_decay, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter reachable from `module` using its accumulated gradient.
    pub fn step(&mut self, module: &mut dyn Module, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, wd) = (self.beta1 as f32, self.beta2 as f32, self.eps, self.weight_decay);
        let (m_all, v_all) = (&mut self.m, &mut self.v);
        let mut idx = 0;
        module.visit_mut("", &mut |_, p: &mut Param| {
            if m_all.len() <= idx {
                m_all.push(vec![0.0; p.len()]);
                v_all.push(vec![0.0; p.len()]);
            }
            let (m, v) = (&mut m_all[idx], &mut v_all[idx]);
            let decay = (1.0 - lr * wd) as f32;
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mhat = m[i] as f64 / bc1;
                let vhat = v[i] as f64 / bc2;
                p.value[i] = p.value[i] * decay - (lr * mhat / (vhat.sqrt() + eps)) as f32;
            }
            idx += 1;
        });
    }
}

/// Plain Adam over a fixed-size `f64` vector.
#[derive(Debug, Clone)]
pub struct Adam<const N: usize> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: [f64; N],
    v: [f64; N],
}

impl<const N: usize> Adam<N> {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: [0.0; N], v: [0.0; N] }
    }

    pub fn step(&mut self, params: &mut [f64; N], grads: &[f64; N]) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..N {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            params[i] -= self.lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + self.eps);
        }
    }
}
