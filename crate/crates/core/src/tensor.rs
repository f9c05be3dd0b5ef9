//! Dense row-major tensors and the bulk numeric primitives layers are built
//! from: matrix multiply, receptive-field gathering (im2col and its
//! scatter-add inverse), and zero padding.
//!
//! Feature maps use HWC layout so the rows produced by patch extraction are
//! contiguous multiply operands. Operations may parallelize internally over
//! independent output rows; every output element is written by exactly one
//! task with a fixed accumulation order.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use rayon::prelude::*;

/// Dense n-dimensional array, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], value: S) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> S) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Element access by multi-index; intended for tests and small paths.
    pub fn at(&self, index: &[usize]) -> S {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: S) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut off = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {} out of bounds at axis {}", ix, i);
            off = off * ext + ix;
        }
        off
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<S>> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elements) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(S) -> S + Sync) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| T::from_double(x.to_double())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.rank(), 2, "rows() requires a 2-D tensor");
        self.shape[0]
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.rank(), 2, "cols() requires a 2-D tensor");
        self.shape[1]
    }

    pub fn row(&self, r: usize) -> &[S] {
        let w = self.cols();
        &self.data[r * w..(r + 1) * w]
    }

    /// Elementwise accumulate; shapes must match.
    pub fn add_assign_tensor(&mut self, other: &Tensor<S>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "cannot add {:?} to {:?}",
                other.shape, self.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }
}

/// Transpose of a 2-D tensor.
pub fn transpose<S: Scalar>(t: &Tensor<S>) -> Result<Tensor<S>> {
    if t.rank() != 2 {
        return Err(Error::shape(format!(
            "transpose expects a 2-D tensor, got {:?}",
            t.shape()
        )));
    }
    let (r, c) = (t.shape[0], t.shape[1]);
    let mut out = Tensor::zeros(&[c, r]);
    for i in 0..r {
        for j in 0..c {
            out.data[j * r + i] = t.data[i * c + j];
        }
    }
    Ok(out)
}

/// Matrix product of two 2-D tensors.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::shape(format!(
            "matmul expects 2-D operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    matmul_into(m, k, n, a.data(), b.data(), out.data_mut());
    Ok(out)
}

/// `c = a @ b` on raw row-major slices, parallelized over row blocks.
pub(crate) fn matmul_into<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    if m == 0 || n == 0 || k == 0 {
        for v in c.iter_mut() {
            *v = S::zero();
        }
        return;
    }
    let threads = rayon::current_num_threads();
    if threads <= 1 || m < 64 {
        S::gemm(m, k, n, S::one(), a, b, S::zero(), c);
        return;
    }
    let chunk_rows = m.div_ceil(threads).max(16);
    c.par_chunks_mut(chunk_rows * n)
        .zip(a.par_chunks(chunk_rows * k))
        .for_each(|(c_chunk, a_chunk)| {
            let rows = a_chunk.len() / k;
            S::gemm(rows, k, n, S::one(), a_chunk, b, S::zero(), c_chunk);
        });
}

/// Zero-pad the spatial border of an `[H, W, C]` map by `margin` pixels.
pub fn pad_zero<S: Scalar>(x: &Tensor<S>, margin: usize) -> Result<Tensor<S>> {
    if x.rank() != 3 {
        return Err(Error::shape(format!(
            "pad_zero expects [H, W, C], got {:?}",
            x.shape()
        )));
    }
    let (h, w, c) = (x.shape[0], x.shape[1], x.shape[2]);
    let mut out = Tensor::zeros(&[h + 2 * margin, w + 2 * margin, c]);
    let ow = w + 2 * margin;
    for i in 0..h {
        let src = &x.data[i * w * c..(i + 1) * w * c];
        let dst_off = ((i + margin) * ow + margin) * c;
        out.data[dst_off..dst_off + w * c].copy_from_slice(src);
    }
    Ok(out)
}

/// Flattened receptive fields of one feature map: one row per output pixel,
/// `K*K*C` columns ordered by window offset then channel. Out-of-bounds taps
/// are exactly zero, so stride-1 same-padding bookkeeping stays trivial.
#[derive(Clone, Debug)]
pub struct PatchMatrix<S = f32> {
    data: Tensor<S>,
    height: usize,
    width: usize,
    channels: usize,
    kernel_size: usize,
}

impl<S: Scalar> PatchMatrix<S> {
    pub fn matrix(&self) -> &Tensor<S> {
        &self.data
    }

    pub fn rows(&self) -> usize {
        self.data.rows()
    }

    pub fn row(&self, r: usize) -> &[S] {
        self.data.row(r)
    }

    /// (H, W, C, K) of the source map.
    pub fn origin_shape(&self) -> (usize, usize, usize, usize) {
        (self.height, self.width, self.channels, self.kernel_size)
    }
}

fn check_window(k: usize) -> Result<usize> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::config(format!(
            "window size must be odd and positive, got {}",
            k
        )));
    }
    Ok(k / 2)
}

/// Gather every k x k receptive field of an `[H, W, C]` map (stride 1,
/// same-padding) into a `[H*W, K*K*C]` matrix.
pub fn extract_patches<S: Scalar>(x: &Tensor<S>, k: usize) -> Result<PatchMatrix<S>> {
    if x.rank() != 3 {
        return Err(Error::shape(format!(
            "extract_patches expects [H, W, C], got {:?}",
            x.shape()
        )));
    }
    let (h, w, c) = (x.shape[0], x.shape[1], x.shape[2]);
    check_window(k)?;
    let mut data = Tensor::zeros(&[h * w, k * k * c]);
    let row_len = k * k * c;
    data.data_mut()
        .par_chunks_mut(row_len)
        .enumerate()
        .for_each(|(p, row)| {
            fill_patch_row(x.data(), h, w, c, k, p / w, p % w, row);
        });
    Ok(PatchMatrix {
        data,
        height: h,
        width: w,
        channels: c,
        kernel_size: k,
    })
}

#[inline]
#[allow(clippy::too_many_arguments)]
fn fill_patch_row<S: Scalar>(
    x: &[S],
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    i: usize,
    j: usize,
    row: &mut [S],
) {
    let r = (k / 2) as isize;
    let mut col = 0;
    for u in -r..=r {
        let si = i as isize + u;
        for v in -r..=r {
            let sj = j as isize + v;
            if si >= 0 && si < h as isize && sj >= 0 && sj < w as isize {
                let off = (si as usize * w + sj as usize) * c;
                row[col..col + c].copy_from_slice(&x[off..off + c]);
            } else {
                for slot in &mut row[col..col + c] {
                    *slot = S::zero();
                }
            }
            col += c;
        }
    }
}

/// Batched patch gather: `[B, H, W, C]` to `[B*H*W, K*K*C]`, rows grouped by
/// sample then pixel.
pub fn im2col<S: Scalar>(x: &Tensor<S>, k: usize) -> Result<Tensor<S>> {
    if x.rank() != 4 {
        return Err(Error::shape(format!(
            "im2col expects [B, H, W, C], got {:?}",
            x.shape()
        )));
    }
    let (b, h, w, c) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    check_window(k)?;
    let row_len = k * k * c;
    let sample_len = h * w * c;
    let mut out = Tensor::zeros(&[b * h * w, row_len]);
    out.data_mut()
        .par_chunks_mut(row_len)
        .enumerate()
        .for_each(|(row_idx, row)| {
            let (s, p) = (row_idx / (h * w), row_idx % (h * w));
            let sample = &x.data()[s * sample_len..(s + 1) * sample_len];
            fill_patch_row(sample, h, w, c, k, p / w, p % w, row);
        });
    Ok(out)
}

/// Inverse of [`im2col`]: scatter-add patch rows back onto `[B, H, W, C]`.
/// Used to route gradients from patch space to input space.
pub fn col2im_add<S: Scalar>(
    cols: &Tensor<S>,
    batch: usize,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
) -> Result<Tensor<S>> {
    let r = check_window(k)? as isize;
    let row_len = k * k * c;
    if cols.rank() != 2 || cols.rows() != batch * h * w || cols.cols() != row_len {
        return Err(Error::shape(format!(
            "col2im expects [{} x {}], got {:?}",
            batch * h * w,
            row_len,
            cols.shape()
        )));
    }
    let sample_len = h * w * c;
    let mut out = Tensor::zeros(&[batch, h, w, c]);
    // Rows from different pixels touch overlapping input positions, so the
    // scatter is sequential within a sample and parallel across samples.
    out.data_mut()
        .par_chunks_mut(sample_len)
        .enumerate()
        .for_each(|(s, sample)| {
            for p in 0..h * w {
                let (i, j) = ((p / w) as isize, (p % w) as isize);
                let row = cols.row(s * h * w + p);
                let mut col = 0;
                for u in -r..=r {
                    let si = i + u;
                    for v in -r..=r {
                        let sj = j + v;
                        if si >= 0 && si < h as isize && sj >= 0 && sj < w as isize {
                            let off = (si as usize * w + sj as usize) * c;
                            for (dst, &src) in sample[off..off + c].iter_mut().zip(&row[col..col + c])
                            {
                                *dst += src;
                            }
                        }
                        col += c;
                    }
                }
            }
        });
    Ok(out)
}
