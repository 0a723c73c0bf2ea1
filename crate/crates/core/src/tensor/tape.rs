//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every intermediate value lives in a slot. Slots derived from at least one
//! trainable input are *nodes* and record the operation needed to replay the
//! chain rule; everything else is a plain constant. Tensors with
//! `requires_grad = false` enter the tape as constants only.

use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{
    axis_extents, gelu_grad_scalar, gelu_scalar, layer_norm_rows, matmul_a_bt_acc, matmul_at_b_acc,
    matmul_into, transpose_last2,
};
use super::loss::{loss_forward_backward, LossKind};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Where a parameter tensor was registered: which tape, which slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeRef {
    tape: u64,
    index: usize,
}

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    index: usize,
    tracked: bool,
}

impl Var {
    /// True when gradients flow through this value.
    pub fn is_tracked(self) -> bool {
        self.tracked
    }
}

const MASK_FILL: f64 = -1e30;

enum Op<T> {
    Const,
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddSuffix { x: usize, y: usize },
    Scale { x: usize, factor: T },
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    BatchMatMul { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize },
    TransposeLast2(usize),
    Reshape(usize),
    Softmax { x: usize, axis: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, normalized: Vec<T>, inv_std: Vec<T> },
    Gelu(usize),
    Narrow { x: usize, axis: usize, start: usize },
    Concat { inputs: Vec<usize>, axis: usize },
    CausalMask(usize),
    ScaleRows { x: usize, scale: Vec<T> },
    Loss { a: usize, b: usize, grad_a: Vec<T>, grad_b: Vec<T> },
    Sum(usize),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Const => "const",
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddSuffix { .. } => "add_broadcast",
            Op::Scale { .. } => "scale",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "bmm",
            Op::TransposeLast2(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
            Op::CausalMask(_) => "causal_mask",
            Op::ScaleRows { .. } => "scale_rows",
            Op::Loss { .. } => "loss",
            Op::Sum(_) => "sum",
        }
    }
}

struct Slot<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
    label: Option<String>,
}

/// Single-threaded recording of one forward pass.
pub struct Tape<T> {
    id: u64,
    slots: Vec<Slot<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            slots: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        let op = if tracked { op } else { Op::Const };
        let mut value = value;
        value.set_requires_grad(false);
        self.slots.push(Slot {
            value,
            op,
            tracked,
            label: None,
        });
        Var {
            index: self.slots.len() - 1,
            tracked,
        }
    }

    /// Number of slots holding a differentiable node.
    pub fn node_count(&self) -> usize {
        self.slots.iter().filter(|s| s.tracked).count()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Registers a parameter as a leaf node. Tensors that do not require
    /// grad are left untouched and `None` is returned.
    pub fn watch(&mut self, tensor: &mut Tensor<T>) -> Option<Var> {
        if !tensor.requires_grad() {
            return None;
        }
        if let Some(node) = tensor.node() {
            if node.tape == self.id {
                return Some(Var {
                    index: node.index,
                    tracked: true,
                });
            }
        }
        let value = Tensor::new(tensor.shape(), tensor.data().to_vec()).expect("valid tensor");
        let var = self.push(value, Op::Leaf, true);
        tensor.set_node(Some(NodeRef {
            tape: self.id,
            index: var.index,
        }));
        Some(var)
    }

    /// Brings a tensor onto the tape: its leaf node when watched here,
    /// otherwise a constant copy.
    pub fn input(&mut self, tensor: &Tensor<T>) -> Result<Var> {
        match tensor.node() {
            Some(node) if node.tape == self.id => Ok(Var {
                index: node.index,
                tracked: true,
            }),
            Some(_) => Err(Error::usage("tensor is bound to a different tape")),
            None => Ok(self.push(
                Tensor::new(tensor.shape(), tensor.data().to_vec())?,
                Op::Const,
                false,
            )),
        }
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Const, false)
    }

    /// Constant copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.slots[v.index].value.clone();
        self.push(value, Op::Const, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.slots[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.slots[v.index].value.shape()
    }

    /// Attaches a diagnostic name to a slot.
    pub fn label(&mut self, v: Var, label: impl Into<String>) {
        self.slots[v.index].label = Some(label.into());
    }

    /// Describes the earliest slot holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<String> {
        self.slots.iter().enumerate().find_map(|(i, s)| {
            (!s.value.all_finite()).then(|| match &s.label {
                Some(label) => format!("`{label}` (slot {i}, {})", s.op.name()),
                None => format!("slot {i} ({}) with shape {:?}", s.op.name(), s.value.shape()),
            })
        })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |p, q| p + q);
        Ok(self.push(out, Op::Add(a.index, b.index), a.tracked || b.tracked))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |p, q| p - q);
        Ok(self.push(out, Op::Sub(a.index, b.index), a.tracked || b.tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |p, q| p * q);
        Ok(self.push(out, Op::Mul(a.index, b.index), a.tracked || b.tracked))
    }

    /// `x + y` where `y`'s shape is a trailing suffix of `x`'s (bias add,
    /// positional table add over a batch).
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xs, ys) = (self.shape(x), self.shape(y));
        if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != *ys {
            return Err(Error::shape("add_broadcast", xs, ys));
        }
        let yv = self.value(y).data();
        let ylen = yv.len().max(1);
        let xv = self.value(x);
        let data = xv.data().iter().enumerate().map(|(i, &v)| v + yv[i % ylen]).collect();
        let out = Tensor::new(xv.shape(), data)?;
        Ok(self.push(out, Op::AddSuffix { x: x.index, y: y.index }, x.tracked || y.tracked))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::lit(factor);
        let out = self.value(x).map(|v| v * f);
        self.push(out, Op::Scale { x: x.index, factor: f }, x.tracked)
    }

    /// `[…, m, k] · [k, n] → […, m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() < 2 || bsh.len() != 2 || ash[ash.len() - 1] != bsh[0] {
            return Err(Error::shape("matmul", &ash, &bsh));
        }
        let (k, n) = (bsh[0], bsh[1]);
        let m = self.value(a).len() / k.max(1);
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let mut shape = ash;
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(&shape, out)?;
        let op = Op::MatMul {
            a: a.index,
            b: b.index,
            m,
            k,
            n,
        };
        Ok(self.push(value, op, a.tracked || b.tracked))
    }

    /// Batched product `[B, m, k] · [B, k, n] → [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] || ash[2] != bsh[1] {
            return Err(Error::shape("bmm", &ash, &bsh));
        }
        let (batch, m, k, n) = (ash[0], ash[1], ash[2], bsh[2]);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                matmul_into(
                    &av[i * m * k..(i + 1) * m * k],
                    &bv[i * k * n..(i + 1) * k * n],
                    m,
                    k,
                    n,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let value = Tensor::new(&[batch, m, n], out)?;
        let op = Op::BatchMatMul {
            a: a.index,
            b: b.index,
            batch,
            m,
            k,
            n,
        };
        Ok(self.push(value, op, a.tracked || b.tracked))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose_last2()?;
        Ok(self.push(out, Op::TransposeLast2(x.index), x.tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x.index), x.tracked))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = super::kernels::softmax(self.value(x), axis)?;
        Ok(self.push(out, Op::Softmax { x: x.index, axis }, x.tracked))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let axis = self.shape(x).len().saturating_sub(1);
        self.softmax(x, axis)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let width = *self.shape(x).last().unwrap_or(&0);
        if self.shape(gain) != [width] || self.shape(bias) != [width] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let res = layer_norm_rows(
            self.value(x).data(),
            self.value(gain).data(),
            self.value(bias).data(),
            T::lit(eps),
        );
        let value = Tensor::new(self.shape(x), res.out)?;
        let tracked = x.tracked || gain.tracked || bias.tracked;
        let op = Op::LayerNorm {
            x: x.index,
            gain: gain.index,
            bias: bias.index,
            normalized: res.normalized,
            inv_std: res.inv_std,
        };
        Ok(self.push(value, op, tracked))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu_scalar);
        self.push(out, Op::Gelu(x.index), x.tracked)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape("narrow", &shape, &[axis, start, len]));
        }
        let (outer, alen, inner) = axis_extents(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(
            value,
            Op::Narrow {
                x: x.index,
                axis,
                start,
            },
            x.tracked,
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::usage("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut total = 0;
        for v in xs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in xs {
                let len = self.shape(*v)[axis];
                let src = self.value(*v).data();
                data.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(&shape, data)?;
        let tracked = xs.iter().any(|v| v.tracked);
        let op = Op::Concat {
            inputs: xs.iter().map(|v| v.index).collect(),
            axis,
        };
        Ok(self.push(value, op, tracked))
    }

    /// Hides future positions of square score matrices `[…, n, n]`.
    pub fn causal_mask(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 || shape[r - 1] != shape[r - 2] {
            return Err(Error::shape("causal_mask", &shape, &[]));
        }
        let n = shape[r - 1];
        let mut out = self.value(x).clone();
        let fill = T::lit(MASK_FILL);
        for (idx, v) in out.data_mut().iter_mut().enumerate() {
            let (i, j) = ((idx / n) % n, idx % n);
            if j > i {
                *v = fill;
            }
        }
        Ok(self.push(out, Op::CausalMask(x.index), x.tracked))
    }

    /// Per-row affine map over the last axis: `x[r, :] · scale[r] + shift[r]`.
    /// Scale and shift are constants.
    pub fn scale_shift_rows(&mut self, x: Var, scale: &[T], shift: &[T]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().unwrap_or(&1);
        let rows = self.value(x).len() / width.max(1);
        if scale.len() != rows || shift.len() != rows {
            return Err(Error::shape("scale_shift_rows", &shape, &[scale.len(), shift.len()]));
        }
        let src = self.value(x).data();
        let data = src
            .iter()
            .enumerate()
            .map(|(i, &v)| v * scale[i / width] + shift[i / width])
            .collect();
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(
            value,
            Op::ScaleRows {
                x: x.index,
                scale: scale.to_vec(),
            },
            x.tracked,
        ))
    }

    /// Mean-reduced loss between `a` and `b`. MASE must go through [`Tape::mase_loss`].
    pub fn loss(&mut self, kind: LossKind, a: Var, b: Var) -> Result<Var> {
        if kind == LossKind::Mase {
            return Err(Error::usage("MASE requires per-series scales; use mase_loss"));
        }
        self.loss_inner(kind, a, b, None)
    }

    /// Mean over elements of `|a − b| / scale`, one scale per row of the last axis.
    pub fn mase_loss(&mut self, a: Var, b: Var, scales: &[T]) -> Result<Var> {
        let width = *self.shape(a).last().unwrap_or(&1);
        if scales.is_empty() || scales.len() * width != self.value(a).len() {
            return Err(Error::shape("mase_loss", self.shape(a), &[scales.len()]));
        }
        self.loss_inner(LossKind::Mase, a, b, Some(scales))
    }

    fn loss_inner(&mut self, kind: LossKind, a: Var, b: Var, scales: Option<&[T]>) -> Result<Var> {
        self.same_shape(kind.name(), a, b)?;
        let (value, grad_a, grad_b) =
            loss_forward_backward(kind, self.value(a).data(), self.value(b).data(), scales);
        let op = Op::Loss {
            a: a.index,
            b: b.index,
            grad_a,
            grad_b,
        };
        Ok(self.push(Tensor::scalar(value), op, a.tracked || b.tracked))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x.index), x.tracked)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Back-propagates from a scalar loss. Every watched leaf receives a
    /// gradient; leaves the loss does not depend on receive zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_value = &self.slots[loss.index].value;
        if loss_value.len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.slots.len()).map(|_| None).collect();
        if loss.tracked {
            grads[loss.index] = Some(vec![T::one()]);
        }
        for i in (0..=loss.index).rev() {
            let slot = &self.slots[i];
            if !slot.tracked {
                continue;
            }
            let g = match &slot.op {
                Op::Leaf | Op::Const => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(i, &g, &mut grads);
        }
        for (i, slot) in self.slots.iter().enumerate() {
            if matches!(slot.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(vec![T::zero(); slot.value.len()]);
            }
            if !matches!(slot.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let slot = &self.slots[i];
        let tracked = |j: usize| self.slots[j].tracked;
        let len = |j: usize| self.slots[j].value.len();
        let acc = |grads: &mut [Option<Vec<T>>], j: usize, f: &mut dyn FnMut(&mut [T])| {
            if !self.slots[j].tracked {
                return;
            }
            let buf = grads[j].get_or_insert_with(|| vec![T::zero(); self.slots[j].value.len()]);
            f(buf);
        };
        match &slot.op {
            Op::Const | Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, &mut |ga| add_into(ga, g));
                acc(grads, *b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, &mut |ga| add_into(ga, g));
                acc(grads, *b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, &v)| *o = *o - v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.slots[*a].value.data(), self.slots[*b].value.data());
                acc(grads, *a, &mut |ga| {
                    for k in 0..g.len() {
                        ga[k] = ga[k] + g[k] * bv[k];
                    }
                });
                acc(grads, *b, &mut |gb| {
                    for k in 0..g.len() {
                        gb[k] = gb[k] + g[k] * av[k];
                    }
                });
            }
            Op::AddSuffix { x, y } => {
                acc(grads, *x, &mut |gx| add_into(gx, g));
                let ylen = len(*y).max(1);
                acc(grads, *y, &mut |gy| {
                    for (k, &v) in g.iter().enumerate() {
                        gy[k % ylen] = gy[k % ylen] + v;
                    }
                });
            }
            Op::Scale { x, factor } => {
                acc(grads, *x, &mut |gx| {
                    gx.iter_mut().zip(g).for_each(|(o, &v)| *o = *o + v * *factor)
                });
            }
            Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (self.slots[*a].value.data(), self.slots[*b].value.data());
                if tracked(*a) {
                    acc(grads, *a, &mut |ga| matmul_a_bt_acc(g, bv, *m, *k, *n, ga));
                }
                if tracked(*b) {
                    acc(grads, *b, &mut |gb| matmul_at_b_acc(av, g, *m, *k, *n, gb));
                }
            }
            Op::BatchMatMul { a, b, batch, m, k, n } => {
                let (av, bv) = (self.slots[*a].value.data(), self.slots[*b].value.data());
                let (sa, sb, sg) = (m * k, k * n, m * n);
                acc(grads, *a, &mut |ga| {
                    for bi in 0..*batch {
                        matmul_a_bt_acc(
                            &g[bi * sg..(bi + 1) * sg],
                            &bv[bi * sb..(bi + 1) * sb],
                            *m,
                            *k,
                            *n,
                            &mut ga[bi * sa..(bi + 1) * sa],
                        );
                    }
                });
                acc(grads, *b, &mut |gb| {
                    for bi in 0..*batch {
                        matmul_at_b_acc(
                            &av[bi * sa..(bi + 1) * sa],
                            &g[bi * sg..(bi + 1) * sg],
                            *m,
                            *k,
                            *n,
                            &mut gb[bi * sb..(bi + 1) * sb],
                        );
                    }
                });
            }
            Op::TransposeLast2(x) => {
                let gt = transpose_last2(g, slot.value.shape());
                acc(grads, *x, &mut |gx| add_into(gx, &gt));
            }
            Op::Reshape(x) => acc(grads, *x, &mut |gx| add_into(gx, g)),
            Op::Softmax { x, axis } => {
                let y = slot.value.data();
                let (outer, alen, inner) = axis_extents(slot.value.shape(), *axis);
                acc(grads, *x, &mut |gx| {
                    for o in 0..outer {
                        for c in 0..inner {
                            let idx = |j: usize| (o * alen + j) * inner + c;
                            let dot = (0..alen).map(|j| g[idx(j)] * y[idx(j)]).sum::<T>();
                            for j in 0..alen {
                                let p = idx(j);
                                gx[p] = gx[p] + y[p] * (g[p] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let gv = self.slots[*gain].value.data();
                let width = gv.len();
                let rows = inv_std.len();
                acc(grads, *x, &mut |gx| {
                    let nf = T::lit(width as f64);
                    for r in 0..rows {
                        let off = r * width;
                        let mut mean_gh = T::zero();
                        let mut mean_ghx = T::zero();
                        for j in 0..width {
                            let gh = g[off + j] * gv[j];
                            mean_gh = mean_gh + gh;
                            mean_ghx = mean_ghx + gh * normalized[off + j];
                        }
                        mean_gh = mean_gh / nf;
                        mean_ghx = mean_ghx / nf;
                        for j in 0..width {
                            let gh = g[off + j] * gv[j];
                            gx[off + j] = gx[off + j]
                                + inv_std[r] * (gh - mean_gh - normalized[off + j] * mean_ghx);
                        }
                    }
                });
                acc(grads, *gain, &mut |gg| {
                    for (k, &v) in g.iter().enumerate() {
                        gg[k % width] = gg[k % width] + v * normalized[k];
                    }
                });
                acc(grads, *bias, &mut |gb| {
                    for (k, &v) in g.iter().enumerate() {
                        gb[k % width] = gb[k % width] + v;
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.slots[*x].value.data();
                acc(grads, *x, &mut |gx| {
                    for k in 0..g.len() {
                        gx[k] = gx[k] + g[k] * gelu_grad_scalar(xv[k]);
                    }
                });
            }
            Op::Narrow { x, axis, start } => {
                let in_shape = self.slots[*x].value.shape();
                let (outer, alen, inner) = axis_extents(in_shape, *axis);
                let nlen = slot.value.shape()[*axis];
                acc(grads, *x, &mut |gx| {
                    for o in 0..outer {
                        let dst = (o * alen + start) * inner;
                        let src = o * nlen * inner;
                        add_into(&mut gx[dst..dst + nlen * inner], &g[src..src + nlen * inner]);
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let out_shape = slot.value.shape();
                let (outer, total, inner) = axis_extents(out_shape, *axis);
                let mut offset = 0;
                for &j in inputs {
                    let jlen = self.slots[j].value.shape()[*axis];
                    acc(grads, j, &mut |gj| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * jlen * inner;
                            add_into(&mut gj[dst..dst + jlen * inner], &g[src..src + jlen * inner]);
                        }
                    });
                    offset += jlen;
                }
            }
            Op::CausalMask(x) => {
                let n = *slot.value.shape().last().unwrap();
                acc(grads, *x, &mut |gx| {
                    for (idx, &v) in g.iter().enumerate() {
                        if idx % n <= (idx / n) % n {
                            gx[idx] = gx[idx] + v;
                        }
                    }
                });
            }
            Op::ScaleRows { x, scale } => {
                let width = *slot.value.shape().last().unwrap_or(&1);
                acc(grads, *x, &mut |gx| {
                    for (k, &v) in g.iter().enumerate() {
                        gx[k] = gx[k] + v * scale[k / width];
                    }
                });
            }
            Op::Loss {
                a,
                b,
                grad_a,
                grad_b,
            } => {
                let up = g[0];
                acc(grads, *a, &mut |ga| {
                    ga.iter_mut().zip(grad_a).for_each(|(o, &v)| *o = *o + up * v)
                });
                acc(grads, *b, &mut |gb| {
                    gb.iter_mut().zip(grad_b).for_each(|(o, &v)| *o = *o + up * v)
                });
            }
            Op::Sum(x) => {
                let up = g[0];
                acc(grads, *x, &mut |gx| gx.iter_mut().for_each(|o| *o = *o + up));
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(o, &v)| *o = *o + v);
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.index).and_then(|g| g.as_deref())
    }

    /// Gradient of a tensor watched on the originating tape.
    pub fn of(&self, tensor: &Tensor<T>) -> Option<&[T]> {
        let node = tensor.node()?;
        if node.tape != self.tape {
            return None;
        }
        self.grads.get(node.index).and_then(|g| g.as_deref())
    }

    /// Moves the gradient into `tensor.grad` (accumulating onto any
    /// existing gradient) and releases its tape binding.
    pub fn apply_to(&mut self, tensor: &mut Tensor<T>) -> Result<()> {
        let Some(node) = tensor.node() else {
            return Ok(());
        };
        if node.tape != self.tape {
            return Err(Error::usage("gradient requested from a different tape"));
        }
        let g = self.grads[node.index]
            .take()
            .unwrap_or_else(|| vec![T::zero(); tensor.len()]);
        let merged = match tensor.take_grad() {
            Some(mut existing) => {
                add_into(&mut existing, &g);
                existing
            }
            None => g,
        };
        tensor.set_grad(merged)?;
        tensor.set_node(None);
        Ok(())
    }
}
