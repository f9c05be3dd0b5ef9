//! Bias-corrected Adam over a flat collection of parameter tensors.
//! Tracked batch-norm statistics are not parameters and never pass through
//! here.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }
}

/// First/second moment estimates per parameter tensor plus the shared step
/// count.
#[derive(Clone, Debug)]
pub struct AdamState<S: Scalar> {
    pub cfg: AdamConfig,
    step: u64,
    first: Vec<Tensor<S>>,
    second: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn for_params(cfg: AdamConfig, params: &[&Tensor<S>]) -> Self {
        AdamState {
            cfg,
            step: 0,
            first: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One in-place update of every parameter from its gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &[&Tensor<S>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::shape(format!(
                "adam state tracks {} tensors, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::shape(format!(
                    "adam shapes disagree: param {:?}, grad {:?}, moment {:?}",
                    p.shape(),
                    g.shape(),
                    m.shape()
                )));
            }
        }

        self.step += 1;
        let lr = S::from_double(self.cfg.lr);
        let b1 = S::from_double(self.cfg.beta1);
        let b2 = S::from_double(self.cfg.beta2);
        let eps = S::from_double(self.cfg.eps);
        let one = S::one();
        let bc1 = one - S::from_double(self.cfg.beta1.powi(self.step as i32));
        let bc2 = one - S::from_double(self.cfg.beta2.powi(self.step as i32));

        for (((param, grad), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            let pd = param.data_mut();
            let gd = grad.data();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let g = gd[i];
                md[i] = b1 * md[i] + (one - b1) * g;
                vd[i] = b2 * vd[i] + (one - b2) * g * g;
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
