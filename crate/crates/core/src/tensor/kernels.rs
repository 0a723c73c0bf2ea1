//! Forward kernels on flat buffers, shared by the eager functions and the tape.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// `out[m×n] = a[m×k] · b[k×n]`.
pub(crate) fn matmul_into<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        row.iter_mut().for_each(|v| *v = T::zero());
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out[k×n] += aᵀ · g` for `a[m×k]`, `g[m×n]`.
pub(crate) fn matmul_at_b_acc<T: Scalar>(a: &[T], g: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o = *o + av * gv;
            }
        }
    }
}

/// `out[m×k] += g · bᵀ` for `g[m×n]`, `b[k×n]`.
pub(crate) fn matmul_a_bt_acc<T: Scalar>(g: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc = acc + gv * bv;
            }
            out[i * k + p] = out[i * k + p] + acc;
        }
    }
}

pub(crate) fn transpose_last2<T: Scalar>(data: &[T], shape: &[usize]) -> Vec<T> {
    let r = shape.len();
    let (rows, cols) = (shape[r - 2], shape[r - 1]);
    let batch = data.len() / (rows * cols).max(1);
    let mut out = vec![T::zero(); data.len()];
    for b in 0..batch {
        let src = &data[b * rows * cols..(b + 1) * rows * cols];
        let dst = &mut out[b * rows * cols..(b + 1) * rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                dst[j * rows + i] = src[i * cols + j];
            }
        }
    }
    out
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_axis<T: Scalar>(data: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_extents(shape, axis);
    let mut out = vec![T::zero(); data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| data[idx(j)]).fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for j in 0..len {
                let e = (data[idx(j)] - max).exp();
                out[idx(j)] = e;
                sum = sum + e;
            }
            for j in 0..len {
                out[idx(j)] = out[idx(j)] / sum;
            }
        }
    }
    out
}

pub(crate) struct LayerNormOut<T> {
    pub out: Vec<T>,
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
}

pub(crate) fn layer_norm_rows<T: Scalar>(x: &[T], gain: &[T], bias: &[T], eps: T) -> LayerNormOut<T> {
    let width = gain.len();
    let rows = x.len() / width;
    let mut out = vec![T::zero(); x.len()];
    let mut normalized = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); rows];
    let n = T::lit(width as f64);
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rstd = T::one() / (var + eps).sqrt();
        inv_std[r] = rstd;
        for j in 0..width {
            let h = (row[j] - mean) * rstd;
            normalized[r * width + j] = h;
            out[r * width + j] = h * gain[j] + bias[j];
        }
    }
    LayerNormOut {
        out,
        normalized,
        inv_std,
    }
}

const GELU_COEF: f64 = 0.044715;

fn gelu_inner<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    c * (x + T::lit(GELU_COEF) * x * x * x)
}

/// GPT-2's tanh approximation of GELU.
pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    T::lit(0.5) * x * (T::one() + gelu_inner(x).tanh())
}

pub(crate) fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let t = gelu_inner(x).tanh();
    let dinner = c * (T::one() + T::lit(3.0 * GELU_COEF) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * dinner
}

/// Matrix product `[…, m, k] · [k, n] → […, m, n]`; leading axes of `a` are
/// treated as extra rows.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() < 2 || b.rank() != 2 || a.shape()[a.rank() - 1] != b.shape()[0] {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let k = b.shape()[0];
    let n = b.shape()[1];
    let m = a.len() / k.max(1);
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    let mut out = vec![T::zero(); m * n];
    matmul_into(a.data(), b.data(), m, k, n, &mut out);
    Tensor::new(&shape, out)
}

/// Numerically stabilised softmax along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::usage(format!(
            "softmax axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    if !x.all_finite() {
        return Err(Error::Numeric("softmax input contains non-finite values".into()));
    }
    Tensor::new(x.shape(), softmax_axis(x.data(), x.shape(), axis))
}

/// Normalises each row over the last axis, then applies `gain` and `bias`.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let width = *x.shape().last().ok_or_else(|| Error::shape("layer_norm", x.shape(), gain.shape()))?;
    if gain.shape() != [width] || bias.shape() != [width] {
        return Err(Error::shape("layer_norm", x.shape(), gain.shape()));
    }
    let res = layer_norm_rows(x.data(), gain.data(), bias.data(), T::lit(eps));
    Tensor::new(x.shape(), res.out)
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}
