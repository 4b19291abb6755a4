use alloc::vec;
use alloc::vec::Vec;

use super::{Parameters, Tensor2};
use crate::{math, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers mirror the parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_model<P: Parameters + ?Sized>(config: AdamConfig, model: &P) -> Self {
        let sizes: Vec<usize> = model.tensors().iter().map(|t| t.data().len()).collect();
        Self::new(config, &sizes)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Tensor2], grads: &[&Tensor2]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::shape(
                alloc::format!("{} moment buffers", self.first.len()),
                alloc::format!("{} params / {} grads", params.len(), grads.len()),
            ));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.data().len() != m.len() || g.shape() != p.shape() {
                return Err(Error::shape(
                    alloc::format!("{}x{}", p.rows(), p.cols()),
                    alloc::format!("{}x{}", g.rows(), g.cols()),
                ));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as f64;
        let bc1 = 1.0 - math::powf(beta1, t);
        let bc2 = 1.0 - math::powf(beta2, t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *x -= lr * m_hat / (math::sqrt(v_hat) + eps);
            }
        }
        Ok(())
    }

    pub fn step_model<P: Parameters + ?Sized>(&mut self, model: &mut P, grads: &P) -> Result<()> {
        let mut params = model.tensors_mut();
        let grads = grads.tensors();
        self.step(&mut params, &grads)
    }
}

/// Plain gradient descent or Adam behind one interface.
#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam(Adam),
}

impl Optimizer {
    pub fn step_model<P: Parameters + ?Sized>(&mut self, model: &mut P, grads: &P) -> Result<()> {
        match self {
            Optimizer::Sgd { lr } => {
                let lr = *lr;
                for (p, g) in model.tensors_mut().into_iter().zip(grads.tensors()) {
                    if p.shape() != g.shape() {
                        return Err(Error::shape(
                            alloc::format!("{}x{}", p.rows(), p.cols()),
                            alloc::format!("{}x{}", g.rows(), g.cols()),
                        ));
                    }
                    p.axpy(-lr, g);
                }
                Ok(())
            }
            Optimizer::Adam(adam) => adam.step_model(model, grads),
        }
    }
}
