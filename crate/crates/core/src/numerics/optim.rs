use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
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
            weight_decay: 0.01,
        }
    }
}

/// AdamW with bias correction and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl AdamW {
    /// Zeroed moments shaped like `params`.
    pub fn new(config: AdamWConfig, params: &[&Tensor]) -> Self {
        let first: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            second: first.clone(),
            first,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. `decay[i]` says whether weight decay applies to parameter `i`.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[&Tensor],
        decay: &[bool],
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() || decay.len() != params.len() {
            return Err(Error::shape(
                "adamw_step",
                &[self.first.len()],
                &[params.len(), grads.len(), decay.len()],
            ));
        }
        if !(lr > 0.0) {
            return Err(Error::Contract(format!("learning rate must be positive, got {lr}")));
        }
        for i in 0..params.len() {
            if params[i].shape() != self.first[i].shape() {
                return Err(Error::shape("adamw_step", self.first[i].shape(), params[i].shape()));
            }
            if grads[i].shape() != params[i].shape() {
                return Err(Error::shape("adamw_step", params[i].shape(), grads[i].shape()));
            }
        }

        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);

        for i in 0..params.len() {
            let wd = if decay[i] { weight_decay } else { 0.0 };
            let p = params[i].data_mut();
            let g = grads[i].data();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for j in 0..p.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p[j] -= lr * (mhat / (vhat.sqrt() + eps) + wd * p[j]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_without_decay_is_noop() {
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        let g = Tensor::zeros(&[2]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &[&p]);
        opt.step(&mut [&mut p], &[&g], &[true], 0.1).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_is_unit_update() {
        let mut p = Tensor::vector(vec![0.5]);
        let g = Tensor::vector(vec![1.0]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &[&p]);
        opt.step(&mut [&mut p], &[&g], &[true], 0.1).unwrap();
        // m̂ = v̂ = 1 after bias correction.
        let expected = 0.5 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert!((p.data()[0] - 0.4).abs() < 1e-6);
    }

    #[test]
    fn repeated_runs_are_bitwise_identical() {
        let run = || {
            let mut p = Tensor::vector(vec![0.3, -0.7, 1.1]);
            let g = Tensor::vector(vec![0.2, 0.5, -0.9]);
            let mut opt = AdamW::new(AdamWConfig::default(), &[&p]);
            for _ in 0..2 {
                opt.step(&mut [&mut p], &[&g], &[true], 1e-3).unwrap();
            }
            p
        };
        let a = run();
        let b = run();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::vector(vec![0.0, 0.0]);
        let g = Tensor::vector(vec![0.0]);
        let mut opt = AdamW::new(AdamWConfig::default(), &[&p]);
        assert!(opt.step(&mut [&mut p], &[&g], &[true], 0.1).is_err());
    }

    #[test]
    fn decay_only_where_enabled() {
        let mut a = Tensor::vector(vec![1.0]);
        let mut b = Tensor::vector(vec![1.0]);
        let z = Tensor::zeros(&[1]);
        let mut opt = AdamW::new(AdamWConfig::default(), &[&a, &b]);
        opt.step(&mut [&mut a, &mut b], &[&z, &z], &[true, false], 0.1)
            .unwrap();
        assert!((a.data()[0] - (1.0 - 0.1 * 0.01)).abs() < 1e-15);
        assert_eq!(b.data()[0], 1.0);
    }
}
