//! Fully connected layer over `[B, Din]` activations.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul, transpose, Tensor};
use rand::Rng;

#[derive(Clone, Debug)]
pub struct DenseParams<S: Scalar> {
    pub weights: Tensor<S>, // [Din, Dout]
    pub bias: Tensor<S>,    // [Dout]
}

#[derive(Clone, Debug)]
pub struct DenseCache<S: Scalar> {
    input: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct DenseGrads<S: Scalar> {
    pub weights: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> DenseGrads<S> {
    pub fn into_vec(self) -> Vec<Tensor<S>> {
        vec![self.weights, self.bias]
    }
}

impl<S: Scalar> DenseParams<S> {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        DenseParams {
            weights: Tensor::zeros(&[d_in, d_out]),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (d_in + d_out) as f64).sqrt();
        DenseParams {
            weights: Tensor::from_fn(&[d_in, d_out], |_| {
                S::from_double(rng.gen_range(-limit..limit))
            }),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.weights.numel() + self.bias.numel()
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<(Tensor<S>, DenseCache<S>)> {
        if x.rank() != 2 || x.cols() != self.input_dim() {
            return Err(Error::shape(format!(
                "dense expects [B, {}], got {:?}",
                self.input_dim(),
                x.shape()
            )));
        }
        let mut y = matmul(x, &self.weights)?;
        let d_out = self.output_dim();
        for row in 0..y.rows() {
            for (j, v) in y.data_mut()[row * d_out..(row + 1) * d_out]
                .iter_mut()
                .enumerate()
            {
                *v += self.bias.data()[j];
            }
        }
        Ok((y, DenseCache { input: x.clone() }))
    }

    pub fn backward(
        &self,
        cache: &DenseCache<S>,
        upstream: &Tensor<S>,
    ) -> Result<(Tensor<S>, DenseGrads<S>)> {
        if upstream.rank() != 2
            || upstream.cols() != self.output_dim()
            || upstream.rows() != cache.input.rows()
        {
            return Err(Error::shape(format!(
                "dense upstream {:?} does not match [{} x {}]",
                upstream.shape(),
                cache.input.rows(),
                self.output_dim()
            )));
        }
        let grad_w = matmul(&transpose(&cache.input)?, upstream)?;
        let mut grad_b = Tensor::zeros(&[self.output_dim()]);
        for row in 0..upstream.rows() {
            for (j, &u) in upstream.row(row).iter().enumerate() {
                grad_b.data_mut()[j] += u;
            }
        }
        let grad_x = matmul(upstream, &transpose(&self.weights)?)?;
        Ok((
            grad_x,
            DenseGrads {
                weights: grad_w,
                bias: grad_b,
            },
        ))
    }
}
