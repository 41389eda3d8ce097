// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense row-major `f32` tensors and the handful of kernels GPT-2 inference
//! and SAE training need.
//!
//! Every reduction runs in a fixed sequential order. In particular matrix
//! products accumulate each output element as `((0 + a0*b0) + a1*b1) + ...`
//! over the inner dimension, so a single row computed on its own is
//! bit-identical to the same row computed as part of a larger batch. The
//! incremental patching path in [`crate::model`] relies on this.

use thiserror::Error;

/// Errors raised by tensor construction and tensor ops.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape:?}")]
    ShapeDataMismatch { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    Axis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: zero-sized feature dimension")]
    EmptyDimension { op: &'static str },
    #[error("{op}: invalid argument: {message}")]
    InvalidArgument { op: &'static str, message: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
}

/// Dense row-major `f32` array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    /// 1-D tensor owning `data`.
    pub fn vector(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// 2-D tensor from nested rows. Rows must share a length.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(TensorError::DimensionMismatch {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Size of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[rows, last_dim]`.
    pub fn num_rows(&self) -> usize {
        self.data.len().checked_div(self.last_dim()).unwrap_or(0)
    }

    /// Row `i` of the `[rows, last_dim]` view.
    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let d = self.last_dim();
        &mut self.data[i * d..(i + 1) * d]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self, TensorError> {
        Self::new(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<(), TensorError> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        matmul(self, rhs)
    }
}

// ---------------------------------------------------------------------------
// Tensor-level ops
// ---------------------------------------------------------------------------

/// Matrix product `[m×k] · [k×n] → [m×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if a.rank() != 2 {
        return Err(TensorError::Rank {
            op: "matmul",
            expected: 2,
            shape: a.shape.clone(),
        });
    }
    if b.rank() != 2 {
        return Err(TensorError::Rank {
            op: "matmul",
            expected: 2,
            shape: b.shape.clone(),
        });
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(TensorError::DimensionMismatch {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    matmul_into(&a.data, &b.data, m, k, n, &mut out);
    let out = Tensor::new(vec![m, n], out)?;
    out.ensure_finite("matmul")?;
    Ok(out)
}

/// Layer norm over the last axis with population variance.
pub fn layer_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f32,
) -> Result<Tensor, TensorError> {
    let d = x.last_dim();
    if d == 0 || x.rank() == 0 {
        return Err(TensorError::EmptyDimension { op: "layer_norm" });
    }
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(TensorError::InvalidArgument {
            op: "layer_norm",
            message: format!("eps must be finite and non-negative, got {eps}"),
        });
    }
    if gamma.numel() != d || beta.numel() != d {
        return Err(TensorError::DimensionMismatch {
            op: "layer_norm",
            left: x.shape.clone(),
            right: gamma.shape.clone(),
        });
    }
    let mut out = vec![0.0; x.numel()];
    for (src, dst) in x.data.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        layer_norm_row(src, &gamma.data, &beta.data, eps, dst);
    }
    let out = Tensor::new(x.shape.clone(), out)?;
    out.ensure_finite("layer_norm")?;
    Ok(out)
}

/// Softmax along `axis`, computed with max subtraction.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor, TensorError> {
    if axis >= x.rank() {
        return Err(TensorError::Axis {
            op: "softmax",
            axis,
            shape: x.shape.clone(),
        });
    }
    let len = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let outer: usize = x.shape[..axis].iter().product();
    let mut out = x.data.clone();
    if len == 0 {
        return Tensor::new(x.shape.clone(), out);
    }
    let mut lane = vec![0.0f32; len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for (j, slot) in lane.iter_mut().enumerate() {
                *slot = out[base + j * inner];
            }
            softmax_in_place(&mut lane);
            for (j, v) in lane.iter().enumerate() {
                out[base + j * inner] = *v;
            }
        }
    }
    Tensor::new(x.shape.clone(), out)
}

/// Elementwise tanh-approximation GELU.
pub fn gelu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| gelu_scalar(v)).collect(),
    }
}

// ---------------------------------------------------------------------------
// Slice kernels
// ---------------------------------------------------------------------------

/// Row tile and column tile of [`matmul_into`].
const TILE_M: usize = 32;
const TILE_N: usize = 512;

/// `out[m×n] = a[m×k] · b[k×n]`, overwriting `out`.
///
/// The output is processed in tiles, k-outer within a tile, with four
/// consecutive k steps applied to each element while it sits in a register.
/// Every element still accumulates sequentially over k starting from zero,
/// so the result for a row does not depend on the other rows in the batch
/// (bit-identical whether a row is computed alone or with others).
pub fn matmul_into(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.iter_mut().for_each(|v| *v = 0.0);
    for i0 in (0..m).step_by(TILE_M) {
        let i1 = (i0 + TILE_M).min(m);
        for j0 in (0..n).step_by(TILE_N) {
            let j1 = (j0 + TILE_N).min(n);
            let mut kk = 0;
            while kk + 4 <= k {
                let b0 = &b[kk * n + j0..kk * n + j1];
                let b1 = &b[(kk + 1) * n + j0..(kk + 1) * n + j1];
                let b2 = &b[(kk + 2) * n + j0..(kk + 2) * n + j1];
                let b3 = &b[(kk + 3) * n + j0..(kk + 3) * n + j1];
                for i in i0..i1 {
                    let ar = &a[i * k + kk..i * k + kk + 4];
                    let (c0, c1, c2, c3) = (ar[0], ar[1], ar[2], ar[3]);
                    let o = &mut out[i * n + j0..i * n + j1];
                    for ((((dst, &x0), &x1), &x2), &x3) in o.iter_mut().zip(b0).zip(b1).zip(b2).zip(b3) {
                        let mut acc = *dst;
                        acc += c0 * x0;
                        acc += c1 * x1;
                        acc += c2 * x2;
                        acc += c3 * x3;
                        *dst = acc;
                    }
                }
                kk += 4;
            }
            for kk in kk..k {
                let b_row = &b[kk * n + j0..kk * n + j1];
                for i in i0..i1 {
                    let coeff = a[i * k + kk];
                    let o = &mut out[i * n + j0..i * n + j1];
                    for (dst, &w) in o.iter_mut().zip(b_row) {
                        *dst += coeff * w;
                    }
                }
            }
        }
    }
}

/// Affine map `out = x · w + bias` for `m` rows; bias is added after the
/// product is complete.
pub fn linear_into(
    x: &[f32],
    w: &[f32],
    bias: &[f32],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [f32],
) {
    matmul_into(x, w, m, k, n, out);
    for row in out.chunks_exact_mut(n) {
        for (dst, &b) in row.iter_mut().zip(bias) {
            *dst += b;
        }
    }
}

/// Transpose of a row-major `[rows × cols]` matrix into `out` (`[cols × rows]`).
pub fn transpose_into(a: &[f32], rows: usize, cols: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for (r, row) in a.chunks_exact(cols).enumerate() {
        for (c, &v) in row.iter().enumerate() {
            out[c * rows + r] = v;
        }
    }
}

/// Sequential dot product.
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f32;
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn layer_norm_row(x: &[f32], gamma: &[f32], beta: &[f32], eps: f32, out: &mut [f32]) {
    let d = x.len() as f32;
    let mut sum = 0.0f32;
    for &v in x {
        sum += v;
    }
    let mean = sum / d;
    let mut sq = 0.0f32;
    for &v in x {
        let c = v - mean;
        sq += c * c;
    }
    let inv = 1.0 / (sq / d + eps).sqrt();
    for (((dst, &v), &g), &b) in out.iter_mut().zip(x).zip(gamma).zip(beta) {
        *dst = (v - mean) * inv * g + b;
    }
}

pub fn softmax_in_place(x: &mut [f32]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

const SQRT_2_OVER_PI: f32 = 0.797_884_6;

pub fn gelu_scalar(x: f32) -> f32 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
}
