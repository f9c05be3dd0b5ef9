//! 2-D convolution (cross-correlation) with stride 1 and same-padding,
//! realized as a patch-matrix multiply. Weights are stored `[K, K, Cin, Cout]`
//! so the flattened kernel lines up column-for-column with im2col rows.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{col2im_add, im2col, matmul, transpose, Tensor};
use rand::Rng;

#[derive(Clone, Debug)]
pub struct ConvParams<S: Scalar> {
    pub weights: Tensor<S>, // [K, K, Cin, Cout]
    pub bias: Tensor<S>,    // [Cout]
}

#[derive(Clone, Debug)]
pub struct ConvCache<S: Scalar> {
    input: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct ConvGrads<S: Scalar> {
    pub weights: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> ConvGrads<S> {
    pub fn into_vec(self) -> Vec<Tensor<S>> {
        vec![self.weights, self.bias]
    }
}

impl<S: Scalar> ConvParams<S> {
    pub fn zeros(kernel_size: usize, c_in: usize, c_out: usize) -> Self {
        ConvParams {
            weights: Tensor::zeros(&[kernel_size, kernel_size, c_in, c_out]),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    pub fn glorot(kernel_size: usize, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        let fan_in = kernel_size * kernel_size * c_in;
        let fan_out = kernel_size * kernel_size * c_out;
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        ConvParams {
            weights: Tensor::from_fn(&[kernel_size, kernel_size, c_in, c_out], |_| {
                S::from_double(rng.gen_range(-limit..limit))
            }),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[3]
    }

    pub fn param_count(&self) -> usize {
        self.weights.numel() + self.bias.numel()
    }

    fn weight_matrix(&self) -> Result<Tensor<S>> {
        let k = self.kernel_size();
        self.weights
            .reshape(&[k * k * self.in_channels(), self.out_channels()])
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<(Tensor<S>, ConvCache<S>)> {
        if x.rank() != 4 || x.shape()[3] != self.in_channels() {
            return Err(Error::shape(format!(
                "conv expects [B, H, W, {}], got {:?}",
                self.in_channels(),
                x.shape()
            )));
        }
        let (b, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let cols = im2col(x, self.kernel_size())?;
        let mut y = matmul(&cols, &self.weight_matrix()?)?;
        let c_out = self.out_channels();
        for px in y.data_mut().chunks_exact_mut(c_out) {
            for (v, &bias) in px.iter_mut().zip(self.bias.data()) {
                *v += bias;
            }
        }
        Ok((
            y.reshape(&[b, h, w, c_out])?,
            ConvCache { input: x.clone() },
        ))
    }

    pub fn backward(
        &self,
        cache: &ConvCache<S>,
        upstream: &Tensor<S>,
    ) -> Result<(Tensor<S>, ConvGrads<S>)> {
        let x = &cache.input;
        let (b, h, w, c_in) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let c_out = self.out_channels();
        if upstream.shape() != [b, h, w, c_out] {
            return Err(Error::shape(format!(
                "conv upstream {:?} does not match [{}, {}, {}, {}]",
                upstream.shape(),
                b,
                h,
                w,
                c_out
            )));
        }
        let k = self.kernel_size();
        let up_mat = upstream.reshape(&[b * h * w, c_out])?;

        let mut grad_bias = Tensor::zeros(&[c_out]);
        for row in up_mat.data().chunks_exact(c_out) {
            for (g, &u) in grad_bias.data_mut().iter_mut().zip(row) {
                *g += u;
            }
        }

        // Patches are cheap to regenerate, so the cache keeps the input
        // instead of the much larger column matrix.
        let cols = im2col(x, k)?;
        let grad_w = matmul(&transpose(&cols)?, &up_mat)?.reshape(&[k, k, c_in, c_out])?;
        let grad_cols = matmul(&up_mat, &transpose(&self.weight_matrix()?)?)?;
        let grad_x = col2im_add(&grad_cols, b, h, w, c_in, k)?;
        Ok((
            grad_x,
            ConvGrads {
                weights: grad_w,
                bias: grad_bias,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct five-loop cross-correlation, the oracle for the im2col path.
    pub(crate) fn conv_oracle(x: &Tensor<f64>, p: &ConvParams<f64>) -> Tensor<f64> {
        let (b, h, w, c_in) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let c_out = p.out_channels();
        let k = p.kernel_size();
        let r = (k / 2) as isize;
        let mut out = Tensor::zeros(&[b, h, w, c_out]);
        for s in 0..b {
            for i in 0..h as isize {
                for j in 0..w as isize {
                    for o in 0..c_out {
                        let mut acc = p.bias.at(&[o]);
                        for u in -r..=r {
                            for v in -r..=r {
                                let (si, sj) = (i + u, j + v);
                                if si < 0 || si >= h as isize || sj < 0 || sj >= w as isize {
                                    continue;
                                }
                                for ch in 0..c_in {
                                    acc += p.weights.at(&[
                                        (u + r) as usize,
                                        (v + r) as usize,
                                        ch,
                                        o,
                                    ]) * x.at(&[s, si as usize, sj as usize, ch]);
                                }
                            }
                        }
                        out.set(&[s, i as usize, j as usize, o], acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut p = ConvParams::<f64>::zeros(3, 1, 1);
        p.weights.set(&[1, 1, 0, 0], 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_fn(&[1, 4, 5, 1], |_| rng.gen_range(-1.0..1.0));
        let (y, _) = p.forward(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_kernel_yields_constant_bias_map() {
        let mut p = ConvParams::<f64>::zeros(3, 2, 2);
        p.bias = Tensor::from_vec(&[2], vec![0.25, -1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::from_fn(&[1, 3, 3, 2], |_| rng.gen_range(-1.0..1.0));
        let (y, _) = p.forward(&x).unwrap();
        for px in y.data().chunks_exact(2) {
            assert_eq!(px, &[0.25, -1.0]);
        }
    }

    #[test]
    fn matches_naive_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = ConvParams::<f64>::glorot(3, 3, 4, &mut rng);
        let x = Tensor::from_fn(&[1, 6, 6, 3], |_| rng.gen_range(-1.0..1.0));
        let (y, _) = p.forward(&x).unwrap();
        let want = conv_oracle(&x, &p);
        for (a, b) in y.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let p = ConvParams::<f64>::zeros(3, 2, 4);
        let x = Tensor::<f64>::zeros(&[1, 4, 4, 3]);
        assert!(p.forward(&x).is_err());
    }
}
