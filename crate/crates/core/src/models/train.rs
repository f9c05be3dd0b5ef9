//! Full-batch-loop training: forward, loss, backward, Adam, with per-epoch
//! train/test loss and wall-clock bookkeeping.

use crate::data::{BatchPlan, ImageDataset};
use crate::error::{Error, Result};
use crate::layers::{l2_normalize_backward, l2_normalize_forward, Mode};
use crate::losses::{cross_entropy, ms_loss, MsLossConfig};
use crate::models::ModelState;
use crate::optim::{AdamConfig, AdamState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::time::Instant;

/// How many of an epoch's batches feed the post-epoch statistics refresh.
/// The batch-norm channels are narrow (bottleneck width 1 by default), so a
/// ~1k-sample estimate is already tight.
const STATS_REFRESH_BATCHES: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    MultiSimilarity,
}

impl LossKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "ce" | "cross-entropy" => Ok(LossKind::CrossEntropy),
            "ms" | "multi-similarity" => Ok(LossKind::MultiSimilarity),
            other => Err(Error::config(format!("unknown loss '{}'", other))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "ce",
            LossKind::MultiSimilarity => "ms",
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub loss: LossKind,
    pub epochs: usize,
    pub plan: BatchPlan,
    pub adam: AdamConfig,
    pub ms: MsLossConfig,
    pub n_classes: usize,
}

/// One epoch of history. `train_loss` is the mean of `batch_losses`;
/// `test_loss` is measured after the epoch's updates.
#[derive(Clone, Debug)]
pub struct EpochStats {
    pub epoch: u64,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
    pub seconds: f64,
    pub batch_losses: Vec<f64>,
}

/// Train in place, returning per-epoch history. Deterministic for a fixed
/// seed when run single-threaded.
pub fn train<S: Scalar>(
    model: &mut ModelState<S>,
    train_ds: &ImageDataset,
    test_ds: Option<&ImageDataset>,
    opts: &TrainOptions,
) -> Result<Vec<EpochStats>> {
    if train_ds.dims() != model.spec.input_shape {
        return Err(Error::config(format!(
            "dataset images {:?} do not match model input {:?}",
            train_ds.dims(),
            model.spec.input_shape
        )));
    }
    if opts.loss == LossKind::CrossEntropy {
        model.ensure_head(opts.n_classes)?;
    }

    let mut history = Vec::with_capacity(opts.epochs);
    if opts.epochs == 0 {
        return Ok(history);
    }

    let mut optimizer = {
        let mut params = model.trainable_params();
        if let Some(head) = &model.head {
            params.push(&head.weights);
            params.push(&head.bias);
        }
        AdamState::for_params(opts.adam, &params)
    };

    for _ in 0..opts.epochs {
        let started = Instant::now();
        let batches = opts.plan.epoch_batches(train_ds.labels(), model.epoch)?;
        let mut batch_losses = Vec::with_capacity(batches.len());
        for indices in &batches {
            let x = train_ds.to_batch::<S>(indices);
            let labels = train_ds.batch_labels(indices);
            let loss = train_step(model, &mut optimizer, &x, &labels, opts)?;
            batch_losses.push(loss);
        }
        // Bring the tracked statistics in line with the weights the epoch
        // ended on, so the recorded test losses measure usable inference.
        let calibration: Vec<Tensor<S>> = batches
            .iter()
            .take(STATS_REFRESH_BATCHES)
            .map(|indices| train_ds.to_batch(indices))
            .collect();
        model.refresh_batch_statistics(&calibration)?;
        let train_loss = batch_losses.iter().sum::<f64>() / batch_losses.len().max(1) as f64;
        let test_loss = match test_ds {
            Some(ds) => Some(evaluate_loss(model, ds, opts.loss, opts)?),
            None => None,
        };
        model.epoch += 1;
        history.push(EpochStats {
            epoch: model.epoch,
            train_loss,
            test_loss,
            seconds: started.elapsed().as_secs_f64(),
            batch_losses,
        });
    }
    Ok(history)
}

fn train_step<S: Scalar>(
    model: &mut ModelState<S>,
    optimizer: &mut AdamState<S>,
    x: &Tensor<S>,
    labels: &[usize],
    opts: &TrainOptions,
) -> Result<f64> {
    let (embeddings, caches) = model.forward_embedding(x, Mode::Train)?;

    let (loss, grad_emb, head_grads) = match opts.loss {
        LossKind::CrossEntropy => {
            let head = model
                .head
                .as_ref()
                .ok_or_else(|| Error::config("cross-entropy needs a classifier head"))?;
            let (logits, head_cache) = head.forward(&embeddings)?;
            let (loss, grad_logits) = cross_entropy(&logits, labels)?;
            let (grad_emb, head_grads) = head.backward(&head_cache, &grad_logits)?;
            (loss.to_double(), grad_emb, Some(head_grads))
        }
        LossKind::MultiSimilarity => {
            let (normalized, cache) = l2_normalize_forward(&embeddings)?;
            let (loss, grad_norm) = ms_loss(&normalized, labels, &opts.ms)?;
            let grad_emb = l2_normalize_backward(&cache, &grad_norm)?;
            (loss.to_double(), grad_emb, None)
        }
    };

    let (_, mut grads) = model.backward(&caches, &grad_emb)?;
    if let Some(head_grads) = head_grads {
        grads.extend(head_grads.into_vec());
    }

    let ModelState { layers, head, .. } = model;
    let mut params: Vec<&mut Tensor<S>> = layers
        .iter_mut()
        .flat_map(|l| l.trainable_params_mut())
        .collect();
    if let Some(head) = head.as_mut() {
        params.push(&mut head.weights);
        params.push(&mut head.bias);
    }
    let grad_refs: Vec<&Tensor<S>> = grads.iter().collect();
    optimizer.step(&mut params, &grad_refs)?;
    Ok(loss)
}

/// Mean loss over a dataset under read-only inference. Cross-entropy runs
/// fixed-order batches covering every sample exactly once; multi-similarity
/// evaluates the same seeded class-balanced batches every call so epochs
/// stay comparable.
pub fn evaluate_loss<S: Scalar>(
    model: &ModelState<S>,
    ds: &ImageDataset,
    loss: LossKind,
    opts: &TrainOptions,
) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::config("cannot evaluate on an empty dataset"));
    }
    match loss {
        LossKind::CrossEntropy => {
            let head = model
                .head
                .as_ref()
                .ok_or_else(|| Error::config("cross-entropy evaluation needs a classifier head"))?;
            let batch_size = opts.plan.batch_size();
            let all: Vec<usize> = (0..ds.len()).collect();
            let mut total = 0.0;
            for chunk in all.chunks(batch_size) {
                let x = ds.to_batch::<S>(chunk);
                let emb = model.embed(&x)?;
                let (logits, _) = head.forward(&emb)?;
                let (loss, _) = cross_entropy(&logits, &ds.batch_labels(chunk))?;
                total += loss.to_double() * chunk.len() as f64;
            }
            Ok(total / ds.len() as f64)
        }
        LossKind::MultiSimilarity => {
            let batches = opts.plan.epoch_batches(ds.labels(), 0)?;
            let mut total = 0.0;
            for indices in &batches {
                let x = ds.to_batch::<S>(indices);
                let emb = model.embed(&x)?;
                let (normalized, _) = l2_normalize_forward(&emb)?;
                let (loss, _) = ms_loss(&normalized, &ds.batch_labels(indices), &opts.ms)?;
                total += loss.to_double();
            }
            Ok(total / batches.len().max(1) as f64)
        }
    }
}
