//! Global average pooling: `[B, H, W, C]` to per-channel spatial means.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GapCache {
    height: usize,
    width: usize,
}

pub fn gap_forward<S: Scalar>(x: &Tensor<S>) -> Result<(Tensor<S>, GapCache)> {
    if x.rank() != 4 {
        return Err(Error::shape(format!(
            "global average pool expects [B, H, W, C], got {:?}",
            x.shape()
        )));
    }
    let (b, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = Tensor::zeros(&[b, c]);
    let inv_area = S::one() / S::from_double((h * w) as f64);
    for s in 0..b {
        let sample = &x.data()[s * h * w * c..(s + 1) * h * w * c];
        let acc = &mut out.data_mut()[s * c..(s + 1) * c];
        for px in sample.chunks_exact(c) {
            for (a, &v) in acc.iter_mut().zip(px) {
                *a += v;
            }
        }
        for a in acc.iter_mut() {
            *a *= inv_area;
        }
    }
    Ok((out, GapCache { height: h, width: w }))
}

/// Spreads the upstream gradient uniformly over the pooled positions.
pub fn gap_backward<S: Scalar>(cache: &GapCache, upstream: &Tensor<S>) -> Result<Tensor<S>> {
    if upstream.rank() != 2 {
        return Err(Error::shape(format!(
            "global average pool upstream must be [B, C], got {:?}",
            upstream.shape()
        )));
    }
    let (b, c) = (upstream.shape()[0], upstream.shape()[1]);
    let (h, w) = (cache.height, cache.width);
    let inv_area = S::one() / S::from_double((h * w) as f64);
    let mut grad = Tensor::zeros(&[b, h, w, c]);
    for s in 0..b {
        let up = &upstream.data()[s * c..(s + 1) * c];
        let sample = &mut grad.data_mut()[s * h * w * c..(s + 1) * h * w * c];
        for px in sample.chunks_exact_mut(c) {
            for (g, &u) in px.iter_mut().zip(up) {
                *g = u * inv_area;
            }
        }
    }
    Ok(grad)
}
