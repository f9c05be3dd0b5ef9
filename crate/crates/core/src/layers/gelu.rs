//! Gaussian Error Linear Unit, in its exact error-function form
//! `x * 0.5 * (1 + erf(x / sqrt(2)))` rather than the tanh approximation.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const FRAC_1_SQRT_2PI: f64 = 0.3989422804014327;

#[inline]
fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

#[inline]
fn std_normal_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Elementwise `x * Phi(x)`, any tensor rank.
pub fn gelu_forward<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| {
        let vf = v.to_double();
        S::from_double(vf * std_normal_cdf(vf))
    })
}

/// Elementwise `upstream * (Phi(x) + x * pdf(x))`.
pub fn gelu_backward<S: Scalar>(x: &Tensor<S>, upstream: &Tensor<S>) -> Result<Tensor<S>> {
    if x.shape() != upstream.shape() {
        return Err(Error::shape(format!(
            "gelu_backward shapes disagree: {:?} vs {:?}",
            x.shape(),
            upstream.shape()
        )));
    }
    let data = x
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&v, &u)| {
            let vf = v.to_double();
            let slope = std_normal_cdf(vf) + vf * std_normal_pdf(vf);
            S::from_double(u.to_double() * slope)
        })
        .collect();
    Tensor::from_vec(x.shape(), data)
}
