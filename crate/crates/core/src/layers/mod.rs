//! Forward and backward passes for every layer the embedding models use:
//! involution with dynamic per-pixel kernel generation, convolution, GELU,
//! batch normalization, global average pooling, dense, and L2 row
//! normalization.
//!
//! Feature maps are batched `[B, H, W, C]` tensors; vector stages operate on
//! `[B, D]`. Each layer's `forward` returns the output together with a cache
//! that its `backward` consumes. Gradients are exact derivatives of the
//! forward map and are validated against central finite differences by the
//! verification suites in [`crate::gradcheck`].

mod batchnorm;
mod conv;
mod dense;
mod gelu;
mod involution;
mod norm;
mod pool;

pub use batchnorm::{BatchNorm, BatchNormCache, BatchNormGrads};
pub use conv::{ConvCache, ConvGrads, ConvParams};
pub use dense::{DenseCache, DenseGrads, DenseParams};
pub use gelu::{gelu_backward, gelu_forward};
pub use involution::{
    involution_backward, involution_forward, InvolutionCache, InvolutionConfig, InvolutionGrads,
    InvolutionLayer, InvolutionParams, KernelGenCache,
};
pub use norm::{l2_normalize_backward, l2_normalize_forward, L2NormalizeCache};
pub use pool::{gap_backward, gap_forward, GapCache};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Whether a forward pass updates batch-norm running statistics (`Train`)
/// or reads them (`Infer`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// One layer of a model trunk.
#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Layer<S: Scalar> {
    Involution(InvolutionLayer<S>),
    Conv(ConvParams<S>),
    Gelu,
    GlobalAvgPool,
    Dense(DenseParams<S>),
    L2Normalize,
}

/// Per-layer forward cache, consumed by the matching `backward`.
#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum LayerCache<S: Scalar> {
    Involution(InvolutionCache<S>),
    Conv(ConvCache<S>),
    Gelu(Tensor<S>),
    GlobalAvgPool(GapCache),
    Dense(DenseCache<S>),
    L2Normalize(L2NormalizeCache<S>),
}

impl<S: Scalar> Layer<S> {
    pub fn forward(&mut self, x: &Tensor<S>, mode: Mode) -> Result<(Tensor<S>, LayerCache<S>)> {
        match self {
            Layer::Involution(layer) => {
                let (y, cache) = layer.forward(x, mode)?;
                Ok((y, LayerCache::Involution(cache)))
            }
            Layer::Conv(params) => {
                let (y, cache) = params.forward(x)?;
                Ok((y, LayerCache::Conv(cache)))
            }
            Layer::Gelu => Ok((gelu_forward(x), LayerCache::Gelu(x.clone()))),
            Layer::GlobalAvgPool => {
                let (y, cache) = gap_forward(x)?;
                Ok((y, LayerCache::GlobalAvgPool(cache)))
            }
            Layer::Dense(params) => {
                let (y, cache) = params.forward(x)?;
                Ok((y, LayerCache::Dense(cache)))
            }
            Layer::L2Normalize => {
                let (y, cache) = l2_normalize_forward(x)?;
                Ok((y, LayerCache::L2Normalize(cache)))
            }
        }
    }

    /// Read-only inference: no cache, no state mutation. Safe to share a
    /// layer across threads for concurrent evaluation.
    pub fn infer(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        match self {
            Layer::Involution(layer) => {
                let kernels = layer.generate_kernels_infer(x)?;
                involution_forward(x, &kernels, &layer.cfg)
            }
            Layer::Conv(params) => Ok(params.forward(x)?.0),
            Layer::Gelu => Ok(gelu_forward(x)),
            Layer::GlobalAvgPool => Ok(gap_forward(x)?.0),
            Layer::Dense(params) => Ok(params.forward(x)?.0),
            Layer::L2Normalize => Ok(l2_normalize_forward(x)?.0),
        }
    }

    /// Returns the input gradient and the parameter gradients in the same
    /// order as [`Layer::trainable_params`].
    pub fn backward(
        &self,
        cache: &LayerCache<S>,
        upstream: &Tensor<S>,
    ) -> Result<(Tensor<S>, Vec<Tensor<S>>)> {
        match (self, cache) {
            (Layer::Involution(layer), LayerCache::Involution(cache)) => {
                let (gx, grads) = layer.backward(cache, upstream)?;
                Ok((gx, grads.into_vec()))
            }
            (Layer::Conv(params), LayerCache::Conv(cache)) => {
                let (gx, grads) = params.backward(cache, upstream)?;
                Ok((gx, grads.into_vec()))
            }
            (Layer::Gelu, LayerCache::Gelu(input)) => {
                Ok((gelu_backward(input, upstream)?, Vec::new()))
            }
            (Layer::GlobalAvgPool, LayerCache::GlobalAvgPool(cache)) => {
                Ok((gap_backward(cache, upstream)?, Vec::new()))
            }
            (Layer::Dense(params), LayerCache::Dense(cache)) => {
                let (gx, grads) = params.backward(cache, upstream)?;
                Ok((gx, grads.into_vec()))
            }
            (Layer::L2Normalize, LayerCache::L2Normalize(cache)) => {
                Ok((l2_normalize_backward(cache, upstream)?, Vec::new()))
            }
            _ => Err(Error::shape("layer cache does not match layer kind")),
        }
    }

    /// Tensors updated by the optimizer, in a stable order.
    pub fn trainable_params(&self) -> Vec<&Tensor<S>> {
        match self {
            Layer::Involution(layer) => layer.params.trainable(),
            Layer::Conv(params) => vec![&params.weights, &params.bias],
            Layer::Dense(params) => vec![&params.weights, &params.bias],
            _ => Vec::new(),
        }
    }

    pub fn trainable_params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        match self {
            Layer::Involution(layer) => layer.params.trainable_mut(),
            Layer::Conv(params) => vec![&mut params.weights, &mut params.bias],
            Layer::Dense(params) => vec![&mut params.weights, &mut params.bias],
            _ => Vec::new(),
        }
    }

    /// All persistent tensors, trainable plus tracked batch-norm statistics,
    /// in serialization order.
    pub fn state_tensors(&self) -> Vec<&Tensor<S>> {
        match self {
            Layer::Involution(layer) => layer.params.state(),
            Layer::Conv(params) => vec![&params.weights, &params.bias],
            Layer::Dense(params) => vec![&params.weights, &params.bias],
            _ => Vec::new(),
        }
    }

    pub fn state_tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        match self {
            Layer::Involution(layer) => layer.params.state_mut(),
            Layer::Conv(params) => vec![&mut params.weights, &mut params.bias],
            Layer::Dense(params) => vec![&mut params.weights, &mut params.bias],
            _ => Vec::new(),
        }
    }

    /// Weight-parameter count: trainable plus tracked statistics.
    pub fn param_count(&self) -> usize {
        self.state_tensors().iter().map(|t| t.numel()).sum()
    }
}
