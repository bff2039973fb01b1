use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn learning_rate(self, learning_rate: f64) -> Self {
        Self { learning_rate, ..self }
    }

    pub fn weight_decay(self, weight_decay: f64) -> Self {
        Self { weight_decay, ..self }
    }
}

/// Adam with decoupled weight decay.
///
/// `p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)` with the usual
/// bias-corrected moment recursions.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.first, &self.second)
    }

    /// One update of `params` given `grads`. Moment buffers are created on the first call.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidArgument(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(Error::InvalidArgument("parameter count changed between steps".into()));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first[i].shape() {
                return Err(Error::InvalidArgument(format!("shape mismatch for parameter {i}")));
            }
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (lr, wd, eps) = (T::of(c.learning_rate), T::of(c.weight_decay), T::of(c.epsilon));
        let one = T::one();
        let bc1 = one - b1.powi(self.step as i32);
        let bc2 = one - b2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let (pd, gd) = (p.data_mut(), g.data());
            for ((pk, &gk), (mk, vk)) in pd
                .iter_mut()
                .zip(gd)
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mk = b1 * *mk + (one - b1) * gk;
                *vk = b2 * *vk + (one - b2) * gk * gk;
                let m_hat = *mk / bc1;
                let v_hat = *vk / bc2;
                *pk = *pk - lr * (m_hat / (v_hat.sqrt() + eps) + wd * *pk);
            }
        }
        Ok(())
    }
}

/// `base_lr * 0.5 * (1 + cos(pi * step / total_steps))`.
pub fn cosine_lr<T: Real>(base_lr: T, step: usize, total_steps: usize) -> Result<T> {
    if total_steps == 0 {
        return Err(Error::InvalidArgument("cosine schedule needs total_steps > 0".into()));
    }
    if step > total_steps {
        return Err(Error::InvalidArgument(format!("step {step} beyond total {total_steps}")));
    }
    let frac = T::of(step as f64 / total_steps as f64);
    Ok(base_lr * T::of(0.5) * (T::one() + (T::PI() * frac).cos()))
}
