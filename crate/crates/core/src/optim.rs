//! AdamW with decoupled weight decay, plus warmup/cosine learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::autograd::Grads;
use crate::nn::ParamSet;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
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
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u64,
}

impl AdamW {
    pub fn new(params: &ParamSet, config: AdamWConfig) -> Self {
        let m: Vec<Matrix> = params
            .ids()
            .map(|id| {
                let (r, c) = params.value(id).shape();
                Matrix::zeros(r, c)
            })
            .collect();
        Self {
            config,
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads, lr: f64) {
        self.t += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for id in params.ids().collect::<Vec<_>>() {
            if !params.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let decay = if params.decays(id) { weight_decay } else { 0.0 };
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let p = params.value_mut(id);
            for k in 0..p.data.len() {
                let gk = g.data[k];
                m.data[k] = beta1 * m.data[k] + (1.0 - beta1) * gk;
                v.data[k] = beta2 * v.data[k] + (1.0 - beta2) * gk * gk;
                let mhat = m.data[k] / bc1;
                let vhat = v.data[k] / bc2;
                p.data[k] -= lr * (mhat / (vhat.sqrt() + eps) + decay * p.data[k]);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    Cosine,
}

/// Linear warmup to `base_lr`, then either constant or cosine decay to zero at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub kind: ScheduleKind,
}

impl LrSchedule {
    pub fn constant(base_lr: f64) -> Self {
        Self {
            base_lr,
            warmup_steps: 0,
            total_steps: 0,
            kind: ScheduleKind::Constant,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        match self.kind {
            ScheduleKind::Constant => self.base_lr,
            ScheduleKind::Cosine => {
                let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
                let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
                0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        let s = LrSchedule {
            base_lr: 1.0,
            warmup_steps: 10,
            total_steps: 110,
            kind: ScheduleKind::Cosine,
        };
        assert!((s.lr_at(0) - 0.1).abs() < 1e-12);
        assert!((s.lr_at(9) - 1.0).abs() < 1e-12);
        assert!((s.lr_at(10) - 1.0).abs() < 1e-12);
        assert!((s.lr_at(60) - 0.5).abs() < 1e-12);
        assert!(s.lr_at(110).abs() < 1e-12);
    }

    #[test]
    fn adamw_minimizes_quadratic() {
        let mut params = ParamSet::new();
        let id = params.add("x", Matrix::from_vec(1, 2, vec![3.0, -2.0]), true);
        let mut opt = AdamW::new(&params, AdamWConfig::default());
        for _ in 0..2000 {
            let x = params.value(id).clone();
            let mut g = Grads::empty(1);
            g.params[0] = Some(x.scaled(2.0));
            opt.step(&mut params, &g, 0.01);
        }
        assert!(params.value(id).sq_norm() < 1e-4);
    }
}
