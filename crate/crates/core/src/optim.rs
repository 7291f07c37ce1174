//! Optimizers with L2-style weight decay (decay added to the gradient).

use serde::{Deserialize, Serialize};

use crate::params::ParamSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl Adam {
    pub fn new(cfg: AdamConfig, like: &ParamSet) -> Self {
        Self {
            cfg,
            step: 0,
            m: like.zeros_like(),
            v: like.zeros_like(),
        }
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &ParamSet) {
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let step_size = c.lr / bc1;
        let it = params
            .tensors_mut()
            .iter_mut()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut().iter_mut().zip(self.v.tensors_mut()));
        for ((p, g), (m, v)) in it {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i] + c.weight_decay * p[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let denom = (v[i] / bc2).sqrt() + c.eps;
                p[i] -= step_size * m[i] / denom;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Cosine-decay the learning rate to zero over the step budget.
    pub cosine: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            cosine: true,
        }
    }
}

impl SgdConfig {
    /// Learning rate at `step` of a `total`-step run.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if !self.cosine || total == 0 {
            return self.lr;
        }
        let t = (step.min(total) as f64) / total as f64;
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub cfg: SgdConfig,
    pub buf: ParamSet,
    /// Whether the momentum buffers hold a value yet.
    pub started: bool,
}

impl Sgd {
    pub fn new(cfg: SgdConfig, like: &ParamSet) -> Self {
        Self {
            cfg,
            buf: like.zeros_like(),
            started: false,
        }
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64) {
        let c = &self.cfg;
        let first = !self.started;
        let it = params
            .tensors_mut()
            .iter_mut()
            .zip(grads.tensors())
            .zip(self.buf.tensors_mut());
        for ((p, g), b) in it {
            let (p, b) = (p.data_mut(), b.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i] + c.weight_decay * p[i];
                b[i] = if first { gi } else { c.momentum * b[i] + gi };
                p[i] -= lr * b[i];
            }
        }
        self.started = true;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use onlineaug_tape::Tensor;

    fn one(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("x", Tensor::from_vec(&[1], vec![v]));
        p
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = one(1.0);
        let mut opt = Adam::new(
            AdamConfig {
                weight_decay: 0.0,
                ..AdamConfig::default()
            },
            &p,
        );
        opt.update(&mut p, &one(3.0));
        let x = p.tensors()[0].item();
        assert!((x - (1.0 - 1e-3)).abs() < 1e-9, "{x}");
    }

    #[test]
    fn sgd_momentum_and_cosine() {
        let cfg = SgdConfig {
            weight_decay: 0.0,
            ..SgdConfig::default()
        };
        let mut p = one(0.0);
        let mut opt = Sgd::new(cfg.clone(), &p);
        opt.update(&mut p, &one(1.0), 0.1);
        opt.update(&mut p, &one(1.0), 0.1);
        assert!((p.tensors()[0].item() + 0.29).abs() < 1e-12);
        assert_eq!(cfg.lr_at(0, 100), 0.1);
        assert!(cfg.lr_at(100, 100).abs() < 1e-15);
        assert!((cfg.lr_at(50, 100) - 0.05).abs() < 1e-12);
    }
}
