//! Training objectives: categorical cross-entropy over classifier logits and
//! the multi-similarity (MS) loss over unit-normalized embeddings, both with
//! analytic gradients. MS mining keeps, per anchor, the negatives harder
//! than the easiest positive and the positives harder than the hardest
//! negative, within a margin.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul, transpose, Tensor};

/// Multi-similarity hyperparameters: positive scale `alpha`, negative scale
/// `beta`, similarity threshold `lambda`, and mining margin `epsilon`.
#[derive(Clone, Copy, Debug)]
pub struct MsLossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub epsilon: f64,
}

impl Default for MsLossConfig {
    fn default() -> Self {
        MsLossConfig {
            alpha: 2.0,
            beta: 50.0,
            lambda: 1.0,
            epsilon: 0.1,
        }
    }
}

impl MsLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha <= 0.0 || self.beta <= 0.0 {
            return Err(Error::config(format!(
                "ms loss scales must be positive, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        if self.epsilon < 0.0 {
            return Err(Error::config(format!(
                "ms loss mining margin must be non-negative, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Pairwise cosine similarities of a batch of unit-normalized embeddings,
/// with their class labels.
#[derive(Clone, Debug)]
pub struct SimilarityMatrix<S: Scalar> {
    pub values: Tensor<S>, // [B, B]
    pub labels: Vec<usize>,
}

impl<S: Scalar> SimilarityMatrix<S> {
    pub fn new(embeddings: &Tensor<S>, labels: &[usize]) -> Result<Self> {
        if embeddings.rank() != 2 {
            return Err(Error::shape(format!(
                "similarity matrix expects [B, D] embeddings, got {:?}",
                embeddings.shape()
            )));
        }
        if embeddings.rows() != labels.len() {
            return Err(Error::shape(format!(
                "{} embeddings but {} labels",
                embeddings.rows(),
                labels.len()
            )));
        }
        let values = matmul(embeddings, &transpose(embeddings)?)?;
        Ok(SimilarityMatrix {
            values,
            labels: labels.to_vec(),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }
}

/// Pairs kept for one anchor after mining.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MinedPairs {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Per-anchor mining. Anchors without any same-label partner are skipped
/// (`None`); when an anchor has no negatives at all, every raw positive is
/// kept.
pub fn mine_pairs<S: Scalar>(
    sim: &SimilarityMatrix<S>,
    cfg: &MsLossConfig,
) -> Vec<Option<MinedPairs>> {
    let b = sim.batch_size();
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let row = sim.values.row(i);
        let raw_pos: Vec<usize> = (0..b)
            .filter(|&j| j != i && sim.labels[j] == sim.labels[i])
            .collect();
        if raw_pos.is_empty() {
            out.push(None);
            continue;
        }
        let raw_neg: Vec<usize> = (0..b).filter(|&j| sim.labels[j] != sim.labels[i]).collect();
        if raw_neg.is_empty() {
            out.push(Some(MinedPairs {
                positives: raw_pos,
                negatives: Vec::new(),
            }));
            continue;
        }
        let min_pos = raw_pos
            .iter()
            .map(|&j| row[j].to_double())
            .fold(f64::INFINITY, f64::min);
        let max_neg = raw_neg
            .iter()
            .map(|&k| row[k].to_double())
            .fold(f64::NEG_INFINITY, f64::max);
        let negatives = raw_neg
            .into_iter()
            .filter(|&k| row[k].to_double() > min_pos - cfg.epsilon)
            .collect();
        let positives = raw_pos
            .into_iter()
            .filter(|&j| row[j].to_double() < max_neg + cfg.epsilon)
            .collect();
        out.push(Some(MinedPairs {
            positives,
            negatives,
        }));
    }
    out
}

/// Multi-similarity loss over `[B, D]` unit-normalized embeddings.
///
/// Averaged over the `m` anchors that have at least one raw positive, each
/// anchor contributes `(1/alpha) ln(1 + sum_P exp(-alpha (s - lambda)))`
/// plus `(1/beta) ln(1 + sum_N exp(beta (s - lambda)))`. The mining
/// selection is treated as a constant of differentiation; the gradient
/// flows through the mined similarities only.
pub fn ms_loss<S: Scalar>(
    embeddings: &Tensor<S>,
    labels: &[usize],
    cfg: &MsLossConfig,
) -> Result<(S, Tensor<S>)> {
    cfg.validate()?;
    let sim = SimilarityMatrix::new(embeddings, labels)?;
    let b = sim.batch_size();
    if b < 2 {
        return Err(Error::config(format!(
            "ms loss needs a batch of at least 2, got {}",
            b
        )));
    }
    let d = embeddings.cols();
    let mined = mine_pairs(&sim, cfg);
    let m = mined.iter().filter(|p| p.is_some()).count();
    let mut grad = Tensor::zeros(&[b, d]);
    if m == 0 {
        return Ok((S::zero(), grad));
    }

    let inv_m = 1.0 / m as f64;
    let mut loss = 0.0;
    for (i, pairs) in mined.iter().enumerate() {
        let Some(pairs) = pairs else { continue };
        let row = sim.values.row(i);

        let pos_exp: Vec<f64> = pairs
            .positives
            .iter()
            .map(|&j| (-cfg.alpha * (row[j].to_double() - cfg.lambda)).exp())
            .collect();
        let pos_sum: f64 = pos_exp.iter().sum();
        loss += (1.0 + pos_sum).ln() / cfg.alpha;

        let neg_exp: Vec<f64> = pairs
            .negatives
            .iter()
            .map(|&k| (cfg.beta * (row[k].to_double() - cfg.lambda)).exp())
            .collect();
        let neg_sum: f64 = neg_exp.iter().sum();
        loss += (1.0 + neg_sum).ln() / cfg.beta;

        // d loss / d s_ij, then s_ij = <e_i, e_j> routes it to both rows.
        for (&j, &e) in pairs.positives.iter().zip(&pos_exp) {
            let w = S::from_double(-inv_m * e / (1.0 + pos_sum));
            accumulate_pair_gradient(&mut grad, embeddings, i, j, w);
        }
        for (&k, &e) in pairs.negatives.iter().zip(&neg_exp) {
            let w = S::from_double(inv_m * e / (1.0 + neg_sum));
            accumulate_pair_gradient(&mut grad, embeddings, i, k, w);
        }
    }
    Ok((S::from_double(loss * inv_m), grad))
}

fn accumulate_pair_gradient<S: Scalar>(
    grad: &mut Tensor<S>,
    embeddings: &Tensor<S>,
    i: usize,
    j: usize,
    weight: S,
) {
    let d = embeddings.cols();
    for t in 0..d {
        let ei = embeddings.data()[i * d + t];
        let ej = embeddings.data()[j * d + t];
        grad.data_mut()[i * d + t] += weight * ej;
        grad.data_mut()[j * d + t] += weight * ei;
    }
}

/// Mean categorical cross-entropy with softmax folded in, stabilized by
/// per-row max subtraction. Returns the loss and its gradient w.r.t. the
/// logits, `(softmax - onehot) / B`.
pub fn cross_entropy<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<(S, Tensor<S>)> {
    if logits.rank() != 2 {
        return Err(Error::shape(format!(
            "cross entropy expects [B, N] logits, got {:?}",
            logits.shape()
        )));
    }
    let (b, n) = (logits.rows(), logits.cols());
    if n < 2 {
        return Err(Error::config(format!(
            "cross entropy needs at least 2 classes, got {}",
            n
        )));
    }
    if labels.len() != b {
        return Err(Error::shape(format!(
            "{} logit rows but {} labels",
            b,
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
        return Err(Error::config(format!(
            "label {} out of range for {} classes",
            bad, n
        )));
    }

    let inv_b = 1.0 / b as f64;
    let mut grad = Tensor::zeros(&[b, n]);
    let mut loss = 0.0;
    for r in 0..b {
        let row = logits.row(r);
        let max = row
            .iter()
            .map(|v| v.to_double())
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.to_double() - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        loss -= (exps[labels[r]] / denom).ln();
        for (c, &e) in exps.iter().enumerate() {
            let softmax = e / denom;
            let onehot = if c == labels[r] { 1.0 } else { 0.0 };
            grad.data_mut()[r * n + c] = S::from_double((softmax - onehot) * inv_b);
        }
    }
    Ok((S::from_double(loss * inv_b), grad))
}
