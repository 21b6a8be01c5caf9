//! Adam with a linear warmup.

use crate::error::Result;
use crate::tensor::Param;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps over which the learning rate ramps linearly from 0 to `lr`.
    pub warmup: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            warmup: 100,
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    params: Vec<Param>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: usize,
}

impl Adam {
    /// Shared slots are updated once.
    pub fn new(params: Vec<Param>, cfg: AdamConfig) -> Self {
        let mut unique: Vec<Param> = Vec::new();
        for p in params {
            if !unique.iter().any(|q| q.same_slot(&p)) {
                unique.push(p);
            }
        }
        let zeros = |p: &Param| vec![0.0; p.numel()];
        Adam {
            m: unique.iter().map(zeros).collect(),
            v: unique.iter().map(zeros).collect(),
            params: unique,
            cfg,
            step: 0,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.cfg.warmup == 0 {
            self.cfg.lr
        } else {
            self.cfg.lr * (step as f64 / self.cfg.warmup as f64).min(1.0)
        }
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    /// Applies one update from the accumulated gradients and clears them.
    pub fn step(&mut self) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let lr = self.lr_at(self.step);
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for ((p, m), v) in self.params.iter().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = p.grad() else { continue };
            let mut w = p.value().to_vec();
            for i in 0..w.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                w[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.cfg.eps);
            }
            p.set_data(w)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let p = Param::new("w", &[3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut opt = Adam::new(vec![p.clone()], AdamConfig { lr: 0.0, ..Default::default() });
        backward(&p.value().mul(&p.value()).unwrap().sum()).unwrap();
        opt.step().unwrap();
        assert_eq!(p.value().to_vec(), vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let p = Param::new("w", &[2], vec![3.0, -4.0]).unwrap();
        let mut opt = Adam::new(vec![p.clone()], AdamConfig { lr: 0.1, warmup: 5, ..Default::default() });
        for _ in 0..300 {
            opt.zero_grad();
            backward(&p.value().mul(&p.value()).unwrap().sum()).unwrap();
            opt.step().unwrap();
        }
        assert!(p.value().data().iter().all(|w| w.abs() < 0.05), "{:?}", p.value().to_vec());
    }

    #[test]
    fn warmup_ramps_linearly() {
        let opt = Adam::new(vec![], AdamConfig { lr: 1.0, warmup: 4, ..Default::default() });
        assert_eq!(opt.lr_at(1), 0.25);
        assert_eq!(opt.lr_at(4), 1.0);
        assert_eq!(opt.lr_at(40), 1.0);
    }
}
