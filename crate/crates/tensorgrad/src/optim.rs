use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::ParamSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Linear warmup length in steps; the rate is constant afterwards.
    pub warmup_steps: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 100,
        }
    }
}

/// Adam with decoupled weight decay.
///
/// One step with gradient `g`:
/// ```text
/// t <- t + 1
/// m <- b1 m + (1 - b1) g
/// v <- b2 v + (1 - b2) g^2
/// p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps) - lr * wd * p
/// ```
/// The decay term uses the value of `p` from before the update.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Learning rate used for step number `t` (1-based).
    pub fn lr_at(&self, t: u64) -> f64 {
        let w = self.config.warmup_steps;
        if w == 0 || t >= w {
            self.config.lr
        } else {
            self.config.lr * t as f64 / w as f64
        }
    }

    /// Updates every trainable parameter from its grad slot.
    pub fn step(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        if self.m.is_empty() {
            for (_, _, t) in params.iter() {
                self.m.push(vec![T::zero(); t.numel()]);
                self.v.push(vec![T::zero(); t.numel()]);
            }
        } else if self.m.len() != params.len() {
            return Err(TensorError::Validation(format!(
                "optimizer tracks {} parameters, set has {}",
                self.m.len(),
                params.len()
            )));
        }
        for (_, name, t) in params.iter() {
            if t.requires_grad() && t.grad().is_none() {
                return Err(TensorError::Validation(format!(
                    "parameter {name:?} has no gradient"
                )));
            }
        }

        self.step += 1;
        let c = &self.config;
        let lr = T::from_f64_lossy(self.lr_at(self.step));
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let eps = T::from_f64_lossy(c.eps);
        let wd = T::from_f64_lossy(c.weight_decay);
        let bc1 = T::from_f64_lossy(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::from_f64_lossy(1.0 - c.beta2.powi(self.step as i32));
        let one = T::one();

        for ((t, m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            if !t.requires_grad() {
                continue;
            }
            let (data, grad) = t.parts_mut();
            let grad = grad.expect("checked above");
            for i in 0..data.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let p = data[i];
                data[i] = p - lr * m_hat / (v_hat.sqrt() + eps) - lr * wd * p;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn cfg(wd: f64) -> AdamWConfig {
        AdamWConfig {
            lr: 0.1,
            weight_decay: wd,
            warmup_steps: 0,
            ..AdamWConfig::default()
        }
    }

    fn single(w: f64, g: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        let id = p.add("w", Tensor::new(vec![1], vec![w]).unwrap()).unwrap();
        p.get_mut(id).zero_grad();
        p.get_mut(id).accumulate_grad(&[g]);
        p
    }

    #[test]
    fn one_step_by_hand() {
        // m = 0.05, v = 0.00025, m_hat = 0.5, v_hat = 0.25
        // w = 1 - 0.1 * 0.5 / (0.5 + 1e-8) - 0.1 * 0.01 * 1 = 0.899 (to 1e-8)
        let mut p = single(1.0, 0.5);
        let mut opt = AdamW::new(cfg(0.01));
        opt.step(&mut p).unwrap();
        let w = p.by_name("w").unwrap().data()[0];
        assert!((w - 0.899).abs() < 1e-7, "{w}");
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = single(0.75, 0.0);
        let mut opt = AdamW::new(cfg(0.0));
        for _ in 0..3 {
            opt.step(&mut p).unwrap();
        }
        assert_eq!(p.by_name("w").unwrap().data()[0], 0.75);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = ParamSet::<f64>::new();
        p.add("w", Tensor::zeros(vec![2])).unwrap();
        let mut opt = AdamW::new(cfg(0.0));
        assert!(opt.step(&mut p).is_err());
    }

    #[test]
    fn frozen_parameter_is_untouched() {
        let mut p = single(2.0, 1.0);
        p.set_frozen("w", true);
        let mut opt = AdamW::new(cfg(0.01));
        opt.step(&mut p).unwrap();
        assert_eq!(p.by_name("w").unwrap().data()[0], 2.0);
    }

    #[test]
    fn warmup_is_linear() {
        let opt = AdamW::<f32>::new(AdamWConfig {
            lr: 1.0,
            warmup_steps: 4,
            ..AdamWConfig::default()
        });
        assert_eq!(opt.lr_at(1), 0.25);
        assert_eq!(opt.lr_at(2), 0.5);
        assert_eq!(opt.lr_at(4), 1.0);
        assert_eq!(opt.lr_at(1000), 1.0);
    }
}
