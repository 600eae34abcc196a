use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with one first/second-moment buffer per parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step_count: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Result<Self> {
        if !(config.lr >= 0.0 && (0.0..1.0).contains(&config.beta1) && (0.0..1.0).contains(&config.beta2) && config.eps > 0.0) {
            return Err(Error::Param(format!("invalid Adam hyperparameters {config:?}")));
        }
        Ok(Adam {
            config,
            step_count: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update in place. `grads[i]` must match `params[i]`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "adam step over {} params with {} grads, state holds {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.dims() != g.dims() || p.numel() != m.len() {
                return Err(Error::shape("adam_step", p.dims(), g.dims()));
            }
        }
        self.step_count += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((w, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = vec![Tensor::from_fn(&[3], |i| i as f32 - 1.0)];
        let before = params[0].clone();
        let mut adam = Adam::new(AdamConfig::default(), &params).unwrap();
        for _ in 0..5 {
            adam.step(&mut params, &[Tensor::zeros(&[3])]).unwrap();
        }
        assert!(params[0].bit_eq(&before));
        assert_eq!(adam.step_count(), 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut params = vec![Tensor::scalar(0.0f32)];
        let mut adam = Adam::new(AdamConfig::default(), &params).unwrap();
        adam.step(&mut params, &[Tensor::scalar(1.0)]).unwrap();
        let expected = -2e-4f32 / (1.0 + 1e-8);
        assert!((params[0].data()[0] - expected).abs() < 1e-9);
    }

    #[test]
    fn quadratic_converges_in_one_hundred_steps() {
        // f(w) = w², grad 2w, from w = 1 with lr 0.1.
        let mut params = vec![Tensor::scalar(1.0f32)];
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &params).unwrap();
        for _ in 0..100 {
            let g = Tensor::scalar(2.0 * params[0].data()[0]);
            adam.step(&mut params, &[g]).unwrap();
        }
        assert!(params[0].data()[0].abs() < 0.1);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = vec![Tensor::zeros(&[2])];
        let mut adam = Adam::new(AdamConfig::default(), &params).unwrap();
        assert!(matches!(adam.step(&mut params, &[Tensor::zeros(&[3])]), Err(Error::Shape { .. })));
        assert_eq!(adam.step_count(), 0);
    }
}
