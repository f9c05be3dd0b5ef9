//! Architecture presets, model construction, parameter accounting, the
//! training loop, weight serialization, and involution kernel-map export.
//!
//! Eight presets are built in. The convolution baselines stack three 3x3
//! convolutions (`cnn3a`: 16/64/128 filters, `cnn3b`: 16/96/128); the
//! involution stacks (`inn2`..`inn4`) chain that many involutions; the
//! hybrids (`hybrid1`..`hybrid3`) put 1..3 involutions in front of the
//! `cnn3a` convolution trunk. Every involution and convolution is followed
//! by GELU, and every trunk ends with global average pooling into a single
//! dense embedding layer. Per-layer parameter arithmetic for all of these is
//! worked through in `docs/parameter-accounting.md`.

mod export;
mod serialize;
mod train;

pub use export::export_kernel_maps;
pub use serialize::{load_weights, save_weights, WEIGHTS_MAGIC};
pub use train::{evaluate_loss, train, EpochStats, LossKind, TrainOptions};

use crate::error::{Error, Result};
use crate::layers::{
    ConvParams, DenseParams, InvolutionConfig, InvolutionLayer, Layer, LayerCache, Mode,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const DEFAULT_EMBEDDING_DIM: usize = 256;
const CONV_KERNEL: usize = 3;
/// Stream offset separating classifier-head initialization from trunk
/// initialization under the same seed.
const HEAD_STREAM: u64 = 0x4845_4144;

/// The built-in architecture presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PresetName {
    Cnn3a,
    Cnn3b,
    Inn2,
    Inn3,
    Inn4,
    Hybrid1,
    Hybrid2,
    Hybrid3,
}

impl PresetName {
    pub const ALL: [PresetName; 8] = [
        PresetName::Cnn3a,
        PresetName::Cnn3b,
        PresetName::Inn2,
        PresetName::Inn3,
        PresetName::Inn4,
        PresetName::Hybrid1,
        PresetName::Hybrid2,
        PresetName::Hybrid3,
    ];

    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "cnn3a" => Ok(PresetName::Cnn3a),
            "cnn3b" => Ok(PresetName::Cnn3b),
            "inn2" => Ok(PresetName::Inn2),
            "inn3" => Ok(PresetName::Inn3),
            "inn4" => Ok(PresetName::Inn4),
            "hybrid1" => Ok(PresetName::Hybrid1),
            "hybrid2" => Ok(PresetName::Hybrid2),
            "hybrid3" => Ok(PresetName::Hybrid3),
            other => Err(Error::config(format!("unknown preset '{}'", other))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            PresetName::Cnn3a => "cnn3a",
            PresetName::Cnn3b => "cnn3b",
            PresetName::Inn2 => "inn2",
            PresetName::Inn3 => "inn3",
            PresetName::Inn4 => "inn4",
            PresetName::Hybrid1 => "hybrid1",
            PresetName::Hybrid2 => "hybrid2",
            PresetName::Hybrid3 => "hybrid3",
        }
    }

    fn involution_layers(&self) -> usize {
        match self {
            PresetName::Inn2 => 2,
            PresetName::Inn3 => 3,
            PresetName::Inn4 => 4,
            PresetName::Hybrid1 => 1,
            PresetName::Hybrid2 => 2,
            PresetName::Hybrid3 => 3,
            _ => 0,
        }
    }

    fn conv_filters(&self) -> &'static [usize] {
        match self {
            PresetName::Cnn3b => &[16, 96, 128],
            PresetName::Inn2 | PresetName::Inn3 | PresetName::Inn4 => &[],
            _ => &[16, 64, 128],
        }
    }
}

/// One layer descriptor in a model specification.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Involution {
        kernel_size: usize,
        groups: usize,
        bottleneck_channels: usize,
    },
    Conv {
        filters: usize,
        kernel_size: usize,
    },
    Gelu,
    GlobalAvgPool,
    Dense {
        units: usize,
    },
    L2Normalize,
}

/// Ordered layer list of a trunk plus its input contract.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub name: String,
    pub input_shape: (usize, usize, usize), // (H, W, C)
    pub layers: Vec<LayerKind>,
    pub embedding_dim: usize,
}

impl ModelSpec {
    pub fn preset(name: PresetName, input_shape: (usize, usize, usize)) -> Self {
        Self::preset_with_embedding(name, input_shape, DEFAULT_EMBEDDING_DIM)
    }

    pub fn preset_with_embedding(
        name: PresetName,
        input_shape: (usize, usize, usize),
        embedding_dim: usize,
    ) -> Self {
        let mut layers = Vec::new();
        for _ in 0..name.involution_layers() {
            layers.push(LayerKind::Involution {
                kernel_size: 3,
                groups: 1,
                bottleneck_channels: 1,
            });
            layers.push(LayerKind::Gelu);
        }
        for &filters in name.conv_filters() {
            layers.push(LayerKind::Conv {
                filters,
                kernel_size: CONV_KERNEL,
            });
            layers.push(LayerKind::Gelu);
        }
        layers.push(LayerKind::GlobalAvgPool);
        layers.push(LayerKind::Dense {
            units: embedding_dim,
        });
        ModelSpec {
            name: name.as_str().to_string(),
            input_shape,
            layers,
            embedding_dim,
        }
    }

    /// Arbitrary layer list, for small verification trunks.
    pub fn custom(
        name: impl Into<String>,
        input_shape: (usize, usize, usize),
        layers: Vec<LayerKind>,
        embedding_dim: usize,
    ) -> Self {
        ModelSpec {
            name: name.into(),
            input_shape,
            layers,
            embedding_dim,
        }
    }
}

enum Stage {
    Map(usize, usize, usize),
    Flat(usize),
}

/// A model: spec, instantiated trunk layers, optional classifier head, and
/// training bookkeeping. The head serves cross-entropy training only and is
/// excluded from parameter counts and weight files.
#[derive(Clone, Debug)]
pub struct ModelState<S: Scalar> {
    pub spec: ModelSpec,
    pub layers: Vec<Layer<S>>,
    pub head: Option<DenseParams<S>>,
    pub seed: u64,
    pub epoch: u64,
}

impl<S: Scalar> ModelState<S> {
    /// Instantiate a spec with seed-deterministic Glorot-uniform weights,
    /// zero biases, and identity batch-norm state.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w, c) = spec.input_shape;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::config(format!(
                "input shape {:?} has a zero extent",
                spec.input_shape
            )));
        }
        let mut stage = Stage::Map(h, w, c);
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (li, kind) in spec.layers.iter().enumerate() {
            let layer = match kind {
                LayerKind::Involution {
                    kernel_size,
                    groups,
                    bottleneck_channels,
                } => {
                    let Stage::Map(_, _, ch) = stage else {
                        return Err(Error::config(format!(
                            "layer {}: involution needs a feature map input",
                            li
                        )));
                    };
                    let cfg = InvolutionConfig {
                        kernel_size: *kernel_size,
                        groups: *groups,
                        channels: ch,
                        bottleneck_channels: *bottleneck_channels,
                    };
                    Layer::Involution(InvolutionLayer::glorot(cfg, &mut rng)?)
                }
                LayerKind::Conv {
                    filters,
                    kernel_size,
                } => {
                    let Stage::Map(hh, ww, ch) = stage else {
                        return Err(Error::config(format!(
                            "layer {}: convolution needs a feature map input",
                            li
                        )));
                    };
                    stage = Stage::Map(hh, ww, *filters);
                    Layer::Conv(ConvParams::glorot(*kernel_size, ch, *filters, &mut rng))
                }
                LayerKind::Gelu => Layer::Gelu,
                LayerKind::GlobalAvgPool => {
                    let Stage::Map(_, _, ch) = stage else {
                        return Err(Error::config(format!(
                            "layer {}: pooling needs a feature map input",
                            li
                        )));
                    };
                    stage = Stage::Flat(ch);
                    Layer::GlobalAvgPool
                }
                LayerKind::Dense { units } => {
                    let Stage::Flat(d) = stage else {
                        return Err(Error::config(format!(
                            "layer {}: dense needs a flat input (pool first)",
                            li
                        )));
                    };
                    stage = Stage::Flat(*units);
                    Layer::Dense(DenseParams::glorot(d, *units, &mut rng))
                }
                LayerKind::L2Normalize => {
                    let Stage::Flat(_) = stage else {
                        return Err(Error::config(format!(
                            "layer {}: l2 normalize needs a flat input",
                            li
                        )));
                    };
                    Layer::L2Normalize
                }
            };
            layers.push(layer);
        }
        let Stage::Flat(out) = stage else {
            return Err(Error::config(
                "model must end in a flat embedding (pool + dense)",
            ));
        };
        if out != spec.embedding_dim {
            return Err(Error::config(format!(
                "trunk produces {} dimensions but spec declares embedding_dim {}",
                out, spec.embedding_dim
            )));
        }
        Ok(ModelState {
            spec,
            layers,
            head: None,
            seed,
            epoch: 0,
        })
    }

    pub fn build_preset(
        name: PresetName,
        input_shape: (usize, usize, usize),
        seed: u64,
    ) -> Result<Self> {
        Self::build(ModelSpec::preset(name, input_shape), seed)
    }

    /// Trunk weight-parameter count: trainable parameters plus tracked
    /// batch-norm statistics; the classifier head is not part of the trunk.
    pub fn count_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    /// Serialized trunk size in binary kilobytes at 4 bytes per parameter.
    pub fn size_kb(&self) -> f64 {
        self.count_parameters() as f64 * 4.0 / 1024.0
    }

    pub fn embedding_dim(&self) -> usize {
        self.spec.embedding_dim
    }

    /// Create the cross-entropy classifier head if missing. Initialization
    /// is deterministic in the model seed but independent of trunk draws.
    pub fn ensure_head(&mut self, n_classes: usize) -> Result<()> {
        if let Some(head) = &self.head {
            if head.output_dim() != n_classes {
                return Err(Error::config(format!(
                    "existing classifier head has {} classes, requested {}",
                    head.output_dim(),
                    n_classes
                )));
            }
            return Ok(());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(HEAD_STREAM);
        self.head = Some(DenseParams::glorot(
            self.spec.embedding_dim,
            n_classes,
            &mut rng,
        ));
        Ok(())
    }

    fn check_batch(&self, batch: &Tensor<S>) -> Result<()> {
        let (h, w, c) = self.spec.input_shape;
        if batch.rank() != 4 || batch.shape()[1..] != [h, w, c] {
            return Err(Error::shape(format!(
                "model expects [B, {}, {}, {}] input, got {:?}",
                h,
                w,
                c,
                batch.shape()
            )));
        }
        Ok(())
    }

    /// Trunk forward pass with per-layer caches for backpropagation. Train
    /// mode updates batch-norm running statistics.
    pub fn forward_embedding(
        &mut self,
        batch: &Tensor<S>,
        mode: Mode,
    ) -> Result<(Tensor<S>, Vec<LayerCache<S>>)> {
        self.check_batch(batch)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = batch.clone();
        for layer in &mut self.layers {
            let (y, cache) = layer.forward(&x, mode)?;
            caches.push(cache);
            x = y;
        }
        Ok((x, caches))
    }

    /// Read-only trunk inference: a pure function of the stored state.
    pub fn embed(&self, batch: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_batch(batch)?;
        let mut x = batch.clone();
        for layer in &self.layers {
            x = layer.infer(&x)?;
        }
        Ok(x)
    }

    /// Backpropagate through the trunk. Returns the input gradient and the
    /// parameter gradients in [`ModelState::trainable_params`] order.
    pub fn backward(
        &self,
        caches: &[LayerCache<S>],
        upstream: &Tensor<S>,
    ) -> Result<(Tensor<S>, Vec<Tensor<S>>)> {
        if caches.len() != self.layers.len() {
            return Err(Error::shape(format!(
                "{} caches for {} layers",
                caches.len(),
                self.layers.len()
            )));
        }
        let mut grad = upstream.clone();
        let mut per_layer: Vec<Vec<Tensor<S>>> = Vec::with_capacity(self.layers.len());
        for (layer, cache) in self.layers.iter().zip(caches).rev() {
            let (gx, grads) = layer.backward(cache, &grad)?;
            per_layer.push(grads);
            grad = gx;
        }
        per_layer.reverse();
        Ok((grad, per_layer.into_iter().flatten().collect()))
    }

    /// Trunk trainable tensors in a stable order (tracked statistics are
    /// excluded; the optimizer must not touch them).
    pub fn trainable_params(&self) -> Vec<&Tensor<S>> {
        self.layers
            .iter()
            .flat_map(|l| l.trainable_params())
            .collect()
    }

    pub fn trainable_params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.trainable_params_mut())
            .collect()
    }

    /// All persistent trunk tensors in serialization order.
    pub fn state_tensors(&self) -> Vec<&Tensor<S>> {
        self.layers.iter().flat_map(|l| l.state_tensors()).collect()
    }

    pub fn state_tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.state_tensors_mut())
            .collect()
    }

    pub fn has_involution(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l, Layer::Involution(_)))
    }

    /// Re-estimate batch-norm running statistics as the plain average of
    /// batch statistics over the given batches, via train-mode forwards with
    /// cumulative-average momenta. No trainable parameter changes.
    ///
    /// The exponential estimates (momentum 0.99) lag the weights by a few
    /// hundred steps; after short training runs inference would otherwise
    /// normalize with statistics that no longer match the kernel generator's
    /// activations.
    pub fn refresh_batch_statistics(&mut self, batches: &[Tensor<S>]) -> Result<()> {
        if batches.is_empty() || !self.has_involution() {
            return Ok(());
        }
        let saved: Vec<S> = self
            .layers
            .iter()
            .filter_map(|l| match l {
                Layer::Involution(inv) => Some(inv.params.norm.momentum),
                _ => None,
            })
            .collect();
        for (j, batch) in batches.iter().enumerate() {
            // Momentum j/(j+1) turns the exponential update into an exact
            // running average over the calibration batches.
            let momentum = S::from_double(j as f64 / (j + 1) as f64);
            for layer in &mut self.layers {
                if let Layer::Involution(inv) = layer {
                    inv.params.norm.momentum = momentum;
                }
            }
            self.forward_embedding(batch, Mode::Train)?;
        }
        let mut saved = saved.into_iter();
        for layer in &mut self.layers {
            if let Layer::Involution(inv) = layer {
                inv.params.norm.momentum = saved.next().expect("layer count unchanged");
            }
        }
        Ok(())
    }

    /// Convert every tensor to another precision, for the double-precision
    /// verification mirror.
    pub fn cast<T: Scalar>(&self) -> ModelState<T> {
        let mut mirror = ModelState::<T>::build(self.spec.clone(), self.seed)
            .expect("spec was already validated");
        for (dst, src) in mirror
            .state_tensors_mut()
            .into_iter()
            .zip(self.state_tensors())
        {
            *dst = src.cast();
        }
        mirror.head = self.head.as_ref().map(|h| DenseParams {
            weights: h.weights.cast(),
            bias: h.bias.cast(),
        });
        mirror.epoch = self.epoch;
        mirror
    }
}
