use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point element type for tensors and layers.
///
/// Model state is kept in `f32`; every layer is also instantiable at `f64`
/// so analytic gradients can be compared against central finite differences
/// at tolerances single precision cannot reach.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssign + Sum + Copy + Debug + Display + Send + Sync + 'static
{
    fn from_double(v: f64) -> Self;
    fn to_double(self) -> f64;

    /// Gauss error function, evaluated in double precision.
    fn erf(self) -> Self {
        Self::from_double(libm::erf(self.to_double()))
    }

    /// `c = alpha * a @ b + beta * c` for row-major matrices.
    ///
    /// # Safety contract (enforced by the caller)
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`, all contiguous row-major.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]);
}

impl Scalar for f32 {
    fn from_double(v: f64) -> Self {
        v as f32
    }

    fn to_double(self) -> f64 {
        self as f64
    }

    fn gemm(m: usize, k: usize, n: usize, alpha: f32, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
        assert_eq!(a.len(), m * k);
        assert_eq!(b.len(), k * n);
        assert_eq!(c.len(), m * n);
        // Safety: lengths checked above; strides describe contiguous row-major
        // buffers, so every pointer access stays in bounds.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Scalar for f64 {
    fn from_double(v: f64) -> Self {
        v
    }

    fn to_double(self) -> f64 {
        self
    }

    fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
        assert_eq!(a.len(), m * k);
        assert_eq!(b.len(), k * n);
        assert_eq!(c.len(), m * n);
        // Safety: as in the f32 implementation.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}
