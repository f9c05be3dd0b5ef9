//! Involution: a spatially varying, channel-shared linear operator. The
//! kernel applied at each pixel is generated from that pixel's own feature
//! vector, so the operator adapts across the image while the only stored
//! weights are the small generator matrices shared by all pixels.
//!
//! The generator is a bottleneck pipeline per pixel:
//! 1x1 reduce -> batch norm -> GELU -> 1x1 span to `K*K*G` kernel values.
//! With the defaults (`K` = 3, one group, bottleneck width 1) an involution
//! layer costs 24 weight parameters on single-channel input and 26 on RGB,
//! counting the two tracked batch-norm statistics per bottleneck channel.
//! The bottleneck width and the normalization inside the generator are fixed
//! by that parameter accounting; see `docs/parameter-accounting.md`.

use crate::error::{Error, Result};
use crate::layers::batchnorm::{BatchNorm, BatchNormCache};
use crate::layers::gelu::{gelu_backward, gelu_forward};
use crate::layers::Mode;
use crate::scalar::Scalar;
use crate::tensor::{col2im_add, im2col, matmul, transpose, Tensor};
use rand::Rng;
use rayon::prelude::*;

/// Hyperparameters of one involution operator. Stride is fixed at 1 with
/// same-padding, so output spatial size always equals input spatial size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InvolutionConfig {
    pub kernel_size: usize,
    pub groups: usize,
    pub channels: usize,
    pub bottleneck_channels: usize,
}

impl InvolutionConfig {
    /// Defaults: 3x3 kernel, one group, bottleneck width 1.
    pub fn new(channels: usize) -> Self {
        InvolutionConfig {
            kernel_size: 3,
            groups: 1,
            channels,
            bottleneck_channels: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return Err(Error::config(format!(
                "involution kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.channels == 0 || self.groups == 0 || self.bottleneck_channels == 0 {
            return Err(Error::config(
                "involution channels, groups, and bottleneck width must be positive",
            ));
        }
        if !self.channels.is_multiple_of(self.groups) {
            return Err(Error::config(format!(
                "channel count {} is not divisible by group count {}",
                self.channels, self.groups
            )));
        }
        Ok(())
    }

    /// Kernel group that input channel `c` shares (contiguous blocks of
    /// `C / G` channels per group).
    #[inline]
    pub fn group_of(&self, channel: usize) -> usize {
        channel * self.groups / self.channels
    }

    pub fn kernel_values(&self) -> usize {
        self.kernel_size * self.kernel_size * self.groups
    }
}

/// Learnable state of the kernel generator.
#[derive(Clone, Debug)]
pub struct InvolutionParams<S: Scalar> {
    pub reduce_weights: Tensor<S>, // [C, bottleneck]
    pub reduce_bias: Tensor<S>,    // [bottleneck]
    pub norm: BatchNorm<S>,        // over bottleneck channels
    pub span_weights: Tensor<S>,   // [bottleneck, K*K*G]
    pub span_bias: Tensor<S>,      // [K*K*G]
}

impl<S: Scalar> InvolutionParams<S> {
    pub fn zeros(cfg: &InvolutionConfig) -> Self {
        InvolutionParams {
            reduce_weights: Tensor::zeros(&[cfg.channels, cfg.bottleneck_channels]),
            reduce_bias: Tensor::zeros(&[cfg.bottleneck_channels]),
            norm: BatchNorm::new(cfg.bottleneck_channels),
            span_weights: Tensor::zeros(&[cfg.bottleneck_channels, cfg.kernel_values()]),
            span_bias: Tensor::zeros(&[cfg.kernel_values()]),
        }
    }

    pub fn glorot(cfg: &InvolutionConfig, rng: &mut impl Rng) -> Self {
        let reduce_limit = (6.0 / (cfg.channels + cfg.bottleneck_channels) as f64).sqrt();
        let span_limit = (6.0 / (cfg.bottleneck_channels + cfg.kernel_values()) as f64).sqrt();
        InvolutionParams {
            reduce_weights: Tensor::from_fn(&[cfg.channels, cfg.bottleneck_channels], |_| {
                S::from_double(rng.gen_range(-reduce_limit..reduce_limit))
            }),
            reduce_bias: Tensor::zeros(&[cfg.bottleneck_channels]),
            norm: BatchNorm::new(cfg.bottleneck_channels),
            span_weights: Tensor::from_fn(&[cfg.bottleneck_channels, cfg.kernel_values()], |_| {
                S::from_double(rng.gen_range(-span_limit..span_limit))
            }),
            span_bias: Tensor::zeros(&[cfg.kernel_values()]),
        }
    }

    /// Trainable plus tracked parameter count. For C channels, bottleneck b,
    /// and K*K*G kernel values this is `(C+1)b + 4b + (b+1)*K*K*G`; the
    /// defaults give 24 for C = 1 and 26 for C = 3.
    pub fn param_count(&self) -> usize {
        self.reduce_weights.numel()
            + self.reduce_bias.numel()
            + self.norm.param_count()
            + self.span_weights.numel()
            + self.span_bias.numel()
    }

    pub fn trainable(&self) -> Vec<&Tensor<S>> {
        vec![
            &self.reduce_weights,
            &self.reduce_bias,
            &self.norm.gamma,
            &self.norm.beta,
            &self.span_weights,
            &self.span_bias,
        ]
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<S>> {
        vec![
            &mut self.reduce_weights,
            &mut self.reduce_bias,
            &mut self.norm.gamma,
            &mut self.norm.beta,
            &mut self.span_weights,
            &mut self.span_bias,
        ]
    }

    pub fn state(&self) -> Vec<&Tensor<S>> {
        vec![
            &self.reduce_weights,
            &self.reduce_bias,
            &self.norm.gamma,
            &self.norm.beta,
            &self.norm.running_mean,
            &self.norm.running_var,
            &self.span_weights,
            &self.span_bias,
        ]
    }

    pub fn state_mut(&mut self) -> Vec<&mut Tensor<S>> {
        vec![
            &mut self.reduce_weights,
            &mut self.reduce_bias,
            &mut self.norm.gamma,
            &mut self.norm.beta,
            &mut self.norm.running_mean,
            &mut self.norm.running_var,
            &mut self.span_weights,
            &mut self.span_bias,
        ]
    }
}

/// Cache of the kernel-generation pipeline for the backward pass.
#[derive(Clone, Debug)]
pub struct KernelGenCache<S: Scalar> {
    input_mat: Tensor<S>,    // [B*H*W, C]
    pre_gelu: Tensor<S>,     // [B*H*W, bottleneck] (after batch norm)
    activated: Tensor<S>,    // [B*H*W, bottleneck]
    norm_cache: BatchNormCache<S>,
}

/// Full forward cache of an involution layer.
#[derive(Clone, Debug)]
pub struct InvolutionCache<S: Scalar> {
    input: Tensor<S>,   // [B, H, W, C]
    kernels: Tensor<S>, // [B, H, W, K, K, G]
    gen: KernelGenCache<S>,
}

/// Parameter gradients in `trainable()` order.
#[derive(Clone, Debug)]
pub struct InvolutionGrads<S: Scalar> {
    pub reduce_weights: Tensor<S>,
    pub reduce_bias: Tensor<S>,
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub span_weights: Tensor<S>,
    pub span_bias: Tensor<S>,
}

impl<S: Scalar> InvolutionGrads<S> {
    pub fn into_vec(self) -> Vec<Tensor<S>> {
        vec![
            self.reduce_weights,
            self.reduce_bias,
            self.gamma,
            self.beta,
            self.span_weights,
            self.span_bias,
        ]
    }
}

#[derive(Clone, Debug)]
pub struct InvolutionLayer<S: Scalar> {
    pub cfg: InvolutionConfig,
    pub params: InvolutionParams<S>,
}

impl<S: Scalar> InvolutionLayer<S> {
    pub fn new(cfg: InvolutionConfig, params: InvolutionParams<S>) -> Result<Self> {
        cfg.validate()?;
        Ok(InvolutionLayer { cfg, params })
    }

    pub fn glorot(cfg: InvolutionConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let params = InvolutionParams::glorot(&cfg, rng);
        Ok(InvolutionLayer { cfg, params })
    }

    /// Generate the per-pixel kernels `[B, H, W, K, K, G]` from the input
    /// map. Each pixel passes through reduce -> batch norm -> GELU -> span;
    /// only the batch-norm statistics couple pixels, and only in train mode.
    pub fn generate_kernels(
        &mut self,
        x: &Tensor<S>,
        mode: Mode,
    ) -> Result<(Tensor<S>, KernelGenCache<S>)> {
        if x.rank() != 4 || x.shape()[3] != self.cfg.channels {
            return Err(Error::shape(format!(
                "involution expects [B, H, W, {}], got {:?}",
                self.cfg.channels,
                x.shape()
            )));
        }
        let (b, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let input_mat = x.reshape(&[b * h * w, c])?;

        let mut reduced = matmul(&input_mat, &self.params.reduce_weights)?;
        let bott = self.cfg.bottleneck_channels;
        for px in reduced.data_mut().chunks_exact_mut(bott) {
            for (v, &bias) in px.iter_mut().zip(self.params.reduce_bias.data()) {
                *v += bias;
            }
        }

        let (pre_gelu, norm_cache) = self.params.norm.forward(&reduced, mode)?;
        let activated = gelu_forward(&pre_gelu);

        let mut spanned = matmul(&activated, &self.params.span_weights)?;
        let kk = self.cfg.kernel_values();
        for px in spanned.data_mut().chunks_exact_mut(kk) {
            for (v, &bias) in px.iter_mut().zip(self.params.span_bias.data()) {
                *v += bias;
            }
        }

        let k = self.cfg.kernel_size;
        let kernels = spanned.reshape(&[b, h, w, k, k, self.cfg.groups])?;
        Ok((
            kernels,
            KernelGenCache {
                input_mat,
                pre_gelu,
                activated,
                norm_cache,
            },
        ))
    }

    /// Kernel generation without cache or mutation, for read-only inference.
    pub fn generate_kernels_infer(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        if x.rank() != 4 || x.shape()[3] != self.cfg.channels {
            return Err(Error::shape(format!(
                "involution expects [B, H, W, {}], got {:?}",
                self.cfg.channels,
                x.shape()
            )));
        }
        let (b, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let input_mat = x.reshape(&[b * h * w, c])?;

        let mut reduced = matmul(&input_mat, &self.params.reduce_weights)?;
        let bott = self.cfg.bottleneck_channels;
        for px in reduced.data_mut().chunks_exact_mut(bott) {
            for (v, &bias) in px.iter_mut().zip(self.params.reduce_bias.data()) {
                *v += bias;
            }
        }
        let activated = gelu_forward(&self.params.norm.infer(&reduced)?);
        let mut spanned = matmul(&activated, &self.params.span_weights)?;
        let kk = self.cfg.kernel_values();
        for px in spanned.data_mut().chunks_exact_mut(kk) {
            for (v, &bias) in px.iter_mut().zip(self.params.span_bias.data()) {
                *v += bias;
            }
        }
        let k = self.cfg.kernel_size;
        spanned.reshape(&[b, h, w, k, k, self.cfg.groups])
    }

    /// Backpropagate through the kernel generator, returning the gradient
    /// w.r.t. the input map and the generator parameter gradients.
    fn generate_kernels_backward(
        &self,
        cache: &KernelGenCache<S>,
        grad_kernels: &Tensor<S>,
        input_shape: &[usize],
    ) -> Result<(Tensor<S>, InvolutionGrads<S>)> {
        let rows = cache.input_mat.rows();
        let kk = self.cfg.kernel_values();
        let up = grad_kernels.reshape(&[rows, kk])?;

        let grad_span_w = matmul(&transpose(&cache.activated)?, &up)?;
        let mut grad_span_b = Tensor::zeros(&[kk]);
        for row in up.data().chunks_exact(kk) {
            for (g, &u) in grad_span_b.data_mut().iter_mut().zip(row) {
                *g += u;
            }
        }
        let grad_activated = matmul(&up, &transpose(&self.params.span_weights)?)?;

        let grad_pre_gelu = gelu_backward(&cache.pre_gelu, &grad_activated)?;
        let (grad_reduced, norm_grads) = self
            .params
            .norm
            .backward(&cache.norm_cache, &grad_pre_gelu)?;

        let bott = self.cfg.bottleneck_channels;
        let grad_reduce_w = matmul(&transpose(&cache.input_mat)?, &grad_reduced)?;
        let mut grad_reduce_b = Tensor::zeros(&[bott]);
        for row in grad_reduced.data().chunks_exact(bott) {
            for (g, &u) in grad_reduce_b.data_mut().iter_mut().zip(row) {
                *g += u;
            }
        }
        let grad_input = matmul(&grad_reduced, &transpose(&self.params.reduce_weights)?)?
            .reshape(input_shape)?;
        Ok((
            grad_input,
            InvolutionGrads {
                reduce_weights: grad_reduce_w,
                reduce_bias: grad_reduce_b,
                gamma: norm_grads.gamma,
                beta: norm_grads.beta,
                span_weights: grad_span_w,
                span_bias: grad_span_b,
            },
        ))
    }

    pub fn forward(&mut self, x: &Tensor<S>, mode: Mode) -> Result<(Tensor<S>, InvolutionCache<S>)> {
        let (kernels, gen) = self.generate_kernels(x, mode)?;
        let y = involution_forward(x, &kernels, &self.cfg)?;
        Ok((
            y,
            InvolutionCache {
                input: x.clone(),
                kernels,
                gen,
            },
        ))
    }

    /// Input gradient sums the direct bilinear path and the kernel-generation
    /// path, since the generated kernels are themselves a function of the
    /// same input.
    pub fn backward(
        &self,
        cache: &InvolutionCache<S>,
        upstream: &Tensor<S>,
    ) -> Result<(Tensor<S>, InvolutionGrads<S>)> {
        let (mut grad_x, grad_kernels) =
            involution_backward(&cache.input, &cache.kernels, &self.cfg, upstream)?;
        let (grad_x_gen, grads) =
            self.generate_kernels_backward(&cache.gen, &grad_kernels, cache.input.shape())?;
        grad_x.add_assign_tensor(&grad_x_gen)?;
        Ok((grad_x, grads))
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }
}

fn check_apply_shapes<S: Scalar>(
    x: &Tensor<S>,
    kernels: &Tensor<S>,
    cfg: &InvolutionConfig,
) -> Result<(usize, usize, usize, usize)> {
    cfg.validate()?;
    if x.rank() != 4 || x.shape()[3] != cfg.channels {
        return Err(Error::shape(format!(
            "involution expects input [B, H, W, {}], got {:?}",
            cfg.channels,
            x.shape()
        )));
    }
    let (b, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let k = cfg.kernel_size;
    if kernels.shape() != [b, h, w, k, k, cfg.groups] {
        return Err(Error::shape(format!(
            "involution kernels {:?} do not match [{}, {}, {}, {}, {}, {}]",
            kernels.shape(),
            b,
            h,
            w,
            k,
            k,
            cfg.groups
        )));
    }
    Ok((b, h, w, c))
}

/// Apply per-pixel kernels: every output value is the kernel-weighted sum of
/// the input's k x k neighborhood in the same channel, with the kernel group
/// chosen by the channel's block. Zero padding, stride 1, output spatial
/// size equals input spatial size.
pub fn involution_forward<S: Scalar>(
    x: &Tensor<S>,
    kernels: &Tensor<S>,
    cfg: &InvolutionConfig,
) -> Result<Tensor<S>> {
    let (b, h, w, c) = check_apply_shapes(x, kernels, cfg)?;
    let k = cfg.kernel_size;
    let g = cfg.groups;
    let taps = k * k;
    let cols = im2col(x, k)?;
    let group_of: Vec<usize> = (0..c).map(|ch| cfg.group_of(ch)).collect();

    let mut out = Tensor::zeros(&[b, h, w, c]);
    out.data_mut()
        .par_chunks_mut(c)
        .enumerate()
        .for_each(|(p, px)| {
            let col = cols.row(p);
            let hrow = &kernels.data()[p * taps * g..(p + 1) * taps * g];
            for (ch, o) in px.iter_mut().enumerate() {
                let grp = group_of[ch];
                let mut acc = S::zero();
                for t in 0..taps {
                    acc += hrow[t * g + grp] * col[t * c + ch];
                }
                *o = acc;
            }
        });
    Ok(out)
}

/// Exact gradients of the bilinear involution map in both operands.
pub fn involution_backward<S: Scalar>(
    x: &Tensor<S>,
    kernels: &Tensor<S>,
    cfg: &InvolutionConfig,
    upstream: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let (b, h, w, c) = check_apply_shapes(x, kernels, cfg)?;
    if upstream.shape() != x.shape() {
        return Err(Error::shape(format!(
            "involution upstream {:?} does not match input {:?}",
            upstream.shape(),
            x.shape()
        )));
    }
    let k = cfg.kernel_size;
    let g = cfg.groups;
    let taps = k * k;
    let cols = im2col(x, k)?;
    let group_of: Vec<usize> = (0..c).map(|ch| cfg.group_of(ch)).collect();

    let mut grad_kernels = Tensor::zeros(&[b, h, w, k, k, g]);
    grad_kernels
        .data_mut()
        .par_chunks_mut(taps * g)
        .enumerate()
        .for_each(|(p, gh)| {
            let col = cols.row(p);
            let up = &upstream.data()[p * c..(p + 1) * c];
            for (ch, &u) in up.iter().enumerate() {
                let grp = group_of[ch];
                for t in 0..taps {
                    gh[t * g + grp] += u * col[t * c + ch];
                }
            }
        });

    let mut grad_cols = Tensor::zeros(&[b * h * w, taps * c]);
    grad_cols
        .data_mut()
        .par_chunks_mut(taps * c)
        .enumerate()
        .for_each(|(p, gcol)| {
            let hrow = &kernels.data()[p * taps * g..(p + 1) * taps * g];
            let up = &upstream.data()[p * c..(p + 1) * c];
            for (ch, &u) in up.iter().enumerate() {
                let grp = group_of[ch];
                for t in 0..taps {
                    gcol[t * c + ch] = hrow[t * g + grp] * u;
                }
            }
        });
    let grad_x = col2im_add(&grad_cols, b, h, w, c, k)?;
    Ok((grad_x, grad_kernels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Five-deep naive loop over Eq-style indices, the oracle for the
    /// patch-matrix implementation.
    pub(crate) fn involution_oracle(
        x: &Tensor<f64>,
        kernels: &Tensor<f64>,
        cfg: &InvolutionConfig,
    ) -> Tensor<f64> {
        let (b, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let k = cfg.kernel_size;
        let r = (k / 2) as isize;
        let mut out = Tensor::zeros(&[b, h, w, c]);
        for s in 0..b {
            for i in 0..h as isize {
                for j in 0..w as isize {
                    for ch in 0..c {
                        let grp = cfg.group_of(ch);
                        let mut acc = 0.0;
                        for u in -r..=r {
                            for v in -r..=r {
                                let (si, sj) = (i + u, j + v);
                                if si < 0 || si >= h as isize || sj < 0 || sj >= w as isize {
                                    continue;
                                }
                                acc += kernels.at(&[
                                    s,
                                    i as usize,
                                    j as usize,
                                    (u + r) as usize,
                                    (v + r) as usize,
                                    grp,
                                ]) * x.at(&[s, si as usize, sj as usize, ch]);
                            }
                        }
                        out.set(&[s, i as usize, j as usize, ch], acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn unit_1x1_kernel_is_identity() {
        let cfg = InvolutionConfig {
            kernel_size: 1,
            groups: 1,
            channels: 2,
            bottleneck_channels: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&[1, 3, 4, 2], &mut rng);
        let kernels = Tensor::filled(&[1, 3, 4, 1, 1, 1], 1.0);
        assert_eq!(involution_forward(&x, &kernels, &cfg).unwrap(), x);
    }

    #[test]
    fn zero_kernels_produce_zero_output() {
        let cfg = InvolutionConfig::new(2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(&[1, 4, 4, 2], &mut rng);
        let kernels = Tensor::zeros(&[1, 4, 4, 3, 3, 1]);
        let y = involution_forward(&x, &kernels, &cfg).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_naive_loop_oracle() {
        let cfg = InvolutionConfig::new(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&[1, 5, 5, 2], &mut rng);
        let kernels = random_tensor(&[1, 5, 5, 3, 3, 1], &mut rng);
        let got = involution_forward(&x, &kernels, &cfg).unwrap();
        let want = involution_oracle(&x, &kernels, &cfg);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn grouped_kernels_match_oracle() {
        let cfg = InvolutionConfig {
            kernel_size: 3,
            groups: 4,
            channels: 4,
            bottleneck_channels: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_tensor(&[2, 4, 3, 4], &mut rng);
        let kernels = random_tensor(&[2, 4, 3, 3, 3, 4], &mut rng);
        let got = involution_forward(&x, &kernels, &cfg).unwrap();
        let want = involution_oracle(&x, &kernels, &cfg);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn output_shape_matches_input_for_all_supported_windows() {
        for k in [1usize, 3, 5] {
            for groups in [1usize, 2] {
                let cfg = InvolutionConfig {
                    kernel_size: k,
                    groups,
                    channels: 2,
                    bottleneck_channels: 1,
                };
                let mut rng = ChaCha8Rng::seed_from_u64(5);
                let x = random_tensor(&[1, 6, 5, 2], &mut rng);
                let kernels = random_tensor(&[1, 6, 5, k, k, groups], &mut rng);
                let y = involution_forward(&x, &kernels, &cfg).unwrap();
                assert_eq!(y.shape(), x.shape());
            }
        }
    }

    #[test]
    fn forward_is_linear_in_both_operands() {
        let cfg = InvolutionConfig::new(3);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x1 = random_tensor(&[1, 4, 4, 3], &mut rng);
        let x2 = random_tensor(&[1, 4, 4, 3], &mut rng);
        let h1 = random_tensor(&[1, 4, 4, 3, 3, 1], &mut rng);
        let h2 = random_tensor(&[1, 4, 4, 3, 3, 1], &mut rng);

        let mut x_sum = x1.clone();
        x_sum.add_assign_tensor(&x2).unwrap();
        let lhs = involution_forward(&x_sum, &h1, &cfg).unwrap();
        let mut rhs = involution_forward(&x1, &h1, &cfg).unwrap();
        rhs.add_assign_tensor(&involution_forward(&x2, &h1, &cfg).unwrap())
            .unwrap();
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            assert!((a - b).abs() < 1e-6);
        }

        let mut h_sum = h1.clone();
        h_sum.add_assign_tensor(&h2).unwrap();
        let lhs = involution_forward(&x1, &h_sum, &cfg).unwrap();
        let mut rhs = involution_forward(&x1, &h1, &cfg).unwrap();
        rhs.add_assign_tensor(&involution_forward(&x1, &h2, &cfg).unwrap())
            .unwrap();
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_trivial_cases() {
        let cfg = InvolutionConfig {
            kernel_size: 1,
            groups: 1,
            channels: 2,
            bottleneck_channels: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_tensor(&[1, 3, 3, 2], &mut rng);
        let kernels = Tensor::filled(&[1, 3, 3, 1, 1, 1], 1.0);

        let zero_up = Tensor::zeros(&[1, 3, 3, 2]);
        let (gx, gh) = involution_backward(&x, &kernels, &cfg, &zero_up).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(gh.data().iter().all(|&v| v == 0.0));

        let up = random_tensor(&[1, 3, 3, 2], &mut rng);
        let (gx, _) = involution_backward(&x, &kernels, &cfg, &up).unwrap();
        assert_eq!(gx, up);
    }

    #[test]
    fn generator_zero_path_emits_span_bias() {
        // Reduce weights and bias zero and the norm at identity: GELU(0) = 0
        // kills the weight path, so every pixel's kernel equals the span bias.
        let cfg = InvolutionConfig::new(1);
        let mut params = InvolutionParams::<f64>::zeros(&cfg);
        let bias: Vec<f64> = (0..9).map(|i| i as f64 * 0.5 - 2.0).collect();
        params.span_bias = Tensor::from_vec(&[9], bias.clone()).unwrap();
        let mut layer = InvolutionLayer::new(cfg, params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_tensor(&[1, 2, 3, 1], &mut rng);
        for mode in [Mode::Train, Mode::Infer] {
            let (kernels, _) = layer.generate_kernels(&x, mode).unwrap();
            assert_eq!(kernels.shape(), &[1, 2, 3, 3, 3, 1]);
            for px in kernels.data().chunks_exact(9) {
                for (a, b) in px.iter().zip(&bias) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn generator_shape_contract() {
        let cfg = InvolutionConfig::new(1);
        let mut layer =
            InvolutionLayer::glorot(cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let x = Tensor::<f64>::zeros(&[1, 28, 28, 1]);
        let (kernels, _) = layer.generate_kernels(&x, Mode::Infer).unwrap();
        assert_eq!(kernels.shape(), &[1, 28, 28, 3, 3, 1]);
    }

    #[test]
    fn generator_matches_scalar_pipeline_on_single_pixel() {
        let cfg = InvolutionConfig::new(1);
        let mut params = InvolutionParams::<f64>::zeros(&cfg);
        params.reduce_weights.set(&[0, 0], 0.7);
        params.reduce_bias.set(&[0], 0.1);
        params.norm.running_mean.set(&[0], 0.2);
        params.norm.running_var.set(&[0], 0.8);
        params.norm.gamma.set(&[0], 1.3);
        params.norm.beta.set(&[0], -0.05);
        for t in 0..9 {
            params.span_weights.set(&[0, t], 0.1 * t as f64 - 0.4);
            params.span_bias.set(&[t], 0.01 * t as f64);
        }
        let mut layer = InvolutionLayer::new(cfg, params).unwrap();

        let value = 0.9;
        let x = Tensor::from_vec(&[1, 1, 1, 1], vec![value]).unwrap();
        let (kernels, _) = layer.generate_kernels(&x, Mode::Infer).unwrap();

        // Scalar walk through reduce -> norm -> GELU -> span.
        let z = 0.7 * value + 0.1;
        let zn = (z - 0.2) / (0.8f64 + 1e-3).sqrt() * 1.3 - 0.05;
        let a = zn * 0.5 * (1.0 + libm::erf(zn / 2f64.sqrt()));
        for t in 0..9 {
            let want = a * (0.1 * t as f64 - 0.4) + 0.01 * t as f64;
            let got = kernels.data()[t];
            assert!((got - want).abs() < 1e-12, "tap {}: {} vs {}", t, got, want);
        }
    }

    #[test]
    fn kernel_generation_is_pixel_local_in_infer_mode() {
        let cfg = InvolutionConfig::new(2);
        let mut layer =
            InvolutionLayer::glorot(cfg, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_tensor(&[1, 4, 4, 2], &mut rng);
        let (base, _) = layer.generate_kernels(&x, Mode::Infer).unwrap();

        let mut bumped = x.clone();
        bumped.set(&[0, 2, 1, 0], bumped.at(&[0, 2, 1, 0]) + 1.0);
        let (changed, _) = layer.generate_kernels(&bumped, Mode::Infer).unwrap();

        let taps = 9;
        for p in 0..16 {
            let same = base.data()[p * taps..(p + 1) * taps]
                == changed.data()[p * taps..(p + 1) * taps];
            if p == 2 * 4 + 1 {
                assert!(!same, "perturbed pixel must change its kernel");
            } else {
                assert!(same, "pixel {} must be unaffected", p);
            }
        }
    }

    #[test]
    fn forward_agrees_across_thread_pools() {
        let cfg = InvolutionConfig::new(3);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_tensor(&[2, 9, 7, 3], &mut rng);
        let kernels = random_tensor(&[2, 9, 7, 3, 3, 1], &mut rng);
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| involution_forward(&x, &kernels, &cfg).unwrap());
        let multi = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap()
            .install(|| involution_forward(&x, &kernels, &cfg).unwrap());
        for (s, m) in single.data().iter().zip(multi.data()) {
            let denom = s.abs().max(1.0);
            assert!((s - m).abs() / denom < 1e-5);
        }
    }

    #[test]
    fn rejects_channel_group_mismatch() {
        let cfg = InvolutionConfig {
            kernel_size: 3,
            groups: 2,
            channels: 3,
            bottleneck_channels: 1,
        };
        assert!(cfg.validate().is_err());
    }
}
