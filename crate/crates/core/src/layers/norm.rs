//! Row-wise L2 normalization, the head that puts embeddings on the unit
//! sphere before cosine similarities are taken.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct L2NormalizeCache<S: Scalar> {
    normalized: Tensor<S>,
    inv_norm: Vec<S>,
}

/// Normalize each row of `[B, D]` to unit L2 norm. Zero rows stay zero.
pub fn l2_normalize_forward<S: Scalar>(x: &Tensor<S>) -> Result<(Tensor<S>, L2NormalizeCache<S>)> {
    if x.rank() != 2 {
        return Err(Error::shape(format!(
            "l2 normalize expects [B, D], got {:?}",
            x.shape()
        )));
    }
    let (b, d) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(&[b, d]);
    let mut inv_norm = vec![S::zero(); b];
    for r in 0..b {
        let row = x.row(r);
        let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt();
        let inv = if norm > S::zero() {
            S::one() / norm
        } else {
            S::zero()
        };
        inv_norm[r] = inv;
        for (o, &v) in out.data_mut()[r * d..(r + 1) * d].iter_mut().zip(row) {
            *o = v * inv;
        }
    }
    let normalized = out.clone();
    Ok((out, L2NormalizeCache { normalized, inv_norm }))
}

/// Projects the upstream gradient onto the tangent of the unit sphere:
/// `grad = (upstream - y * <y, upstream>) / ||x||` per row.
pub fn l2_normalize_backward<S: Scalar>(
    cache: &L2NormalizeCache<S>,
    upstream: &Tensor<S>,
) -> Result<Tensor<S>> {
    if upstream.shape() != cache.normalized.shape() {
        return Err(Error::shape(format!(
            "l2 normalize upstream {:?} does not match {:?}",
            upstream.shape(),
            cache.normalized.shape()
        )));
    }
    let (b, d) = (upstream.rows(), upstream.cols());
    let mut grad = Tensor::zeros(&[b, d]);
    for r in 0..b {
        let y = cache.normalized.row(r);
        let up = upstream.row(r);
        let dot = y.iter().zip(up).map(|(&a, &b)| a * b).sum::<S>();
        let inv = cache.inv_norm[r];
        for ((g, &u), &yv) in grad.data_mut()[r * d..(r + 1) * d]
            .iter_mut()
            .zip(up)
            .zip(y)
        {
            *g = inv * (u - yv * dot);
        }
    }
    Ok(grad)
}
