//! Batch normalization over the channel axis of an `[N, C]` activation
//! matrix. Training normalizes with batch statistics and folds them into the
//! tracked running estimates; inference is a fixed affine map of the running
//! statistics.

use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Trainable scale/shift plus tracked running statistics. The tracked
/// tensors count toward a model's weight parameters even though the
/// optimizer never touches them.
#[derive(Clone, Debug)]
pub struct BatchNorm<S: Scalar> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
    pub epsilon: S,
    pub momentum: S,
}

#[derive(Clone, Debug)]
pub struct BatchNormCache<S: Scalar> {
    normalized: Tensor<S>,
    inv_std: Vec<S>,
    mode: Mode,
}

#[derive(Clone, Debug)]
pub struct BatchNormGrads<S: Scalar> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
}

impl<S: Scalar> BatchNorm<S> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::filled(&[channels], S::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], S::one()),
            epsilon: S::from_double(1e-3),
            momentum: S::from_double(0.99),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Trainable plus tracked parameter count (2 + 2 per channel).
    pub fn param_count(&self) -> usize {
        4 * self.channels()
    }

    /// Inference without cache or mutation: the fixed affine map of the
    /// running statistics.
    pub fn infer(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let c = self.channels();
        if x.rank() != 2 || x.cols() != c {
            return Err(Error::shape(format!(
                "batch norm expects [N, {}], got {:?}",
                c,
                x.shape()
            )));
        }
        let inv_std: Vec<S> = self
            .running_var
            .data()
            .iter()
            .map(|&v| S::one() / (v + self.epsilon).sqrt())
            .collect();
        let mut out = Tensor::zeros(&[x.rows(), c]);
        for (o, px) in out
            .data_mut()
            .chunks_exact_mut(c)
            .zip(x.data().chunks_exact(c))
        {
            for ch in 0..c {
                let xh = (px[ch] - self.running_mean.data()[ch]) * inv_std[ch];
                o[ch] = self.gamma.data()[ch] * xh + self.beta.data()[ch];
            }
        }
        Ok(out)
    }

    pub fn forward(&mut self, x: &Tensor<S>, mode: Mode) -> Result<(Tensor<S>, BatchNormCache<S>)> {
        let c = self.channels();
        if x.rank() != 2 || x.cols() != c {
            return Err(Error::shape(format!(
                "batch norm expects [N, {}], got {:?}",
                c,
                x.shape()
            )));
        }
        let n = x.rows();
        if n == 0 {
            return Err(Error::shape("batch norm requires at least one row"));
        }

        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![S::zero(); c];
                let mut var = vec![S::zero(); c];
                for row in 0..n {
                    for (ch, &v) in x.row(row).iter().enumerate() {
                        mean[ch] += v;
                    }
                }
                let inv_n = S::one() / S::from_double(n as f64);
                for m in mean.iter_mut() {
                    *m *= inv_n;
                }
                for row in 0..n {
                    for (ch, &v) in x.row(row).iter().enumerate() {
                        let d = v - mean[ch];
                        var[ch] += d * d;
                    }
                }
                for v in var.iter_mut() {
                    *v *= inv_n;
                }
                // Fold batch statistics into the tracked estimates.
                for ch in 0..c {
                    let rm = self.running_mean.data()[ch];
                    let rv = self.running_var.data()[ch];
                    self.running_mean.data_mut()[ch] =
                        self.momentum * rm + (S::one() - self.momentum) * mean[ch];
                    self.running_var.data_mut()[ch] =
                        self.momentum * rv + (S::one() - self.momentum) * var[ch];
                }
                (mean, var)
            }
            Mode::Infer => (
                self.running_mean.data().to_vec(),
                self.running_var.data().to_vec(),
            ),
        };

        let inv_std: Vec<S> = var
            .iter()
            .map(|&v| S::one() / (v + self.epsilon).sqrt())
            .collect();
        let mut normalized = Tensor::zeros(&[n, c]);
        let mut out = Tensor::zeros(&[n, c]);
        for row in 0..n {
            for ch in 0..c {
                let idx = row * c + ch;
                let xh = (x.data()[idx] - mean[ch]) * inv_std[ch];
                normalized.data_mut()[idx] = xh;
                out.data_mut()[idx] = self.gamma.data()[ch] * xh + self.beta.data()[ch];
            }
        }
        Ok((
            out,
            BatchNormCache {
                normalized,
                inv_std,
                mode,
            },
        ))
    }

    pub fn backward(
        &self,
        cache: &BatchNormCache<S>,
        upstream: &Tensor<S>,
    ) -> Result<(Tensor<S>, BatchNormGrads<S>)> {
        let c = self.channels();
        if upstream.shape() != cache.normalized.shape() {
            return Err(Error::shape(format!(
                "batch norm upstream {:?} does not match cached activations {:?}",
                upstream.shape(),
                cache.normalized.shape()
            )));
        }
        let n = upstream.rows();
        let mut d_gamma = vec![S::zero(); c];
        let mut d_beta = vec![S::zero(); c];
        for row in 0..n {
            for ch in 0..c {
                let idx = row * c + ch;
                let up = upstream.data()[idx];
                d_beta[ch] += up;
                d_gamma[ch] += up * cache.normalized.data()[idx];
            }
        }

        let mut grad_x = Tensor::zeros(&[n, c]);
        match cache.mode {
            Mode::Train => {
                // Batch statistics depend on every row, so the input gradient
                // carries the mean and projection corrections.
                let inv_n = S::one() / S::from_double(n as f64);
                for row in 0..n {
                    for ch in 0..c {
                        let idx = row * c + ch;
                        let up = upstream.data()[idx];
                        let xh = cache.normalized.data()[idx];
                        let centered =
                            up - inv_n * d_beta[ch] - xh * inv_n * d_gamma[ch];
                        grad_x.data_mut()[idx] =
                            self.gamma.data()[ch] * cache.inv_std[ch] * centered;
                    }
                }
            }
            Mode::Infer => {
                for row in 0..n {
                    for ch in 0..c {
                        let idx = row * c + ch;
                        grad_x.data_mut()[idx] = upstream.data()[idx]
                            * self.gamma.data()[ch]
                            * cache.inv_std[ch];
                    }
                }
            }
        }
        Ok((
            grad_x,
            BatchNormGrads {
                gamma: Tensor::from_vec(&[c], d_gamma)?,
                beta: Tensor::from_vec(&[c], d_beta)?,
            },
        ))
    }
}
