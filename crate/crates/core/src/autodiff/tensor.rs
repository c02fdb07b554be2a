use std::cell::Cell;
use std::fmt;
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::tape::{NodeId, Op, Saved, Tape};
use crate::error::{Error, Result};

/// Floating-point mode for recorded operations.
///
/// Storage is always `f64`; in [`Precision::F32`] every operation's output
/// is rounded to the nearest `f32`, which is what training uses by default.
/// [`Precision::F64`] is for gradient checks and bit-exact reproducibility.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

thread_local! {
    static PRECISION: Cell<Precision> = const { Cell::new(Precision::F64) };
}

/// The precision used by operations recorded on this thread.
pub fn precision() -> Precision {
    PRECISION.with(|p| p.get())
}

/// Runs `f` with operations on this thread rounded to `precision`.
pub fn with_precision<R>(precision: Precision, f: impl FnOnce() -> R) -> R {
    struct Restore(Precision);
    impl Drop for Restore {
        fn drop(&mut self) {
            PRECISION.with(|p| p.set(self.0));
        }
    }
    let _restore = Restore(PRECISION.with(|p| p.replace(precision)));
    f()
}

fn finish(mut data: Vec<f64>) -> Vec<f64> {
    if precision() == Precision::F32 {
        data.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
    data
}

#[derive(Clone)]
struct Link {
    tape: Tape,
    id: NodeId,
}

/// Dense row-major array, optionally linked to a node on a [`Tape`].
///
/// Tensors without a link are constants: operations on them are not
/// recorded and they never receive gradients.
#[derive(Clone)]
pub struct Tensor {
    shape: Rc<[usize]>,
    data: Rc<Vec<f64>>,
    link: Option<Link>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("Tensor");
        d.field("shape", &self.shape);
        if self.data.len() <= 16 {
            d.field("data", &self.data);
        }
        d.field("node", &self.link.as_ref().map(|l| l.id)).finish()
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if kernels::numel(shape) != data.len() {
            return Err(Error::BufferLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self::raw(shape, data))
    }

    fn raw(shape: &[usize], data: Vec<f64>) -> Self {
        Self {
            shape: shape.into(),
            data: Rc::new(data),
            link: None,
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::raw(&[n], data)
    }

    pub fn scalar(v: f64) -> Self {
        Self::raw(&[], vec![v])
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::raw(shape, vec![v; kernels::numel(shape)])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_linked(&self) -> bool {
        self.link.is_some()
    }

    pub fn tape(&self) -> Option<&Tape> {
        self.link.as_ref().map(|l| &l.tape)
    }

    pub(crate) fn link(&self) -> Option<(&Tape, NodeId)> {
        self.link.as_ref().map(|l| (&l.tape, l.id))
    }

    pub(crate) fn linked(&self, tape: Tape, id: NodeId) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.clone(),
            link: Some(Link { tape, id }),
        }
    }

    /// Same values, cut off from the tape (the stop-gradient operation).
    pub fn detach(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.clone(),
            link: None,
        }
    }

    /// Elementwise map producing a constant.
    pub fn map_detached(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::raw(&self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    fn record(op: Op, inputs: &[&Tensor], shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let mut tape: Option<&Tape> = None;
        for t in inputs {
            if let Some(l) = &t.link {
                match tape {
                    Some(existing) if !existing.same(&l.tape) => {
                        return Err(Error::TapeMismatch(op.name()))
                    }
                    _ => tape = Some(&l.tape),
                }
            }
        }
        let out = Self::raw(shape, finish(data));
        let Some(tape) = tape else {
            return Ok(out);
        };
        let saved = inputs
            .iter()
            .map(|t| Saved {
                id: t.link.as_ref().map(|l| l.id),
                value: t.detach(),
            })
            .collect();
        let id = tape.push(op, saved, out.clone());
        Ok(out.linked(tape.clone(), id))
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Self::record(op, &[self], &self.shape, data).expect("single input cannot mismatch tapes")
    }

    fn binary(&self, other: &Tensor, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let name = op.name();
        if self.shape == other.shape {
            let data = self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect();
            return Self::record(op, &[self, other], &self.shape.clone(), data);
        }
        let shape = kernels::broadcast_shape(&self.shape, &other.shape)
            .ok_or_else(|| Error::shape(name, &[&self.shape, &other.shape]))?;
        let a = self.broadcast_to(&shape)?;
        let b = other.broadcast_to(&shape)?;
        a.binary(&b, op, f)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Mul, |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Div, |a, b| a / b)
    }

    pub fn neg(&self) -> Tensor {
        self.unary(Op::Neg, |v| -v)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(Op::Scale(c), |v| v * c)
    }

    pub fn offset(&self, c: f64) -> Tensor {
        self.unary(Op::Offset, |v| v + c)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn log(&self) -> Tensor {
        self.unary(Op::Log, f64::ln)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(Op::Sigmoid, sigmoid)
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(Op::Tanh, f64::tanh)
    }

    pub fn sin(&self) -> Tensor {
        self.unary(Op::Sin, f64::sin)
    }

    pub fn cos(&self) -> Tensor {
        self.unary(Op::Cos, f64::cos)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(Op::Relu, |v| v.max(0.0))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.unary(Op::Clamp(lo, hi), |v| v.clamp(lo, hi))
    }

    pub fn square(&self) -> Tensor {
        self.mul(self).expect("same shape")
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(Error::shape("matmul", &[a, b]));
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, &self.data, false, &other.data, false, &mut out, false);
        Self::record(Op::MatMul, &[self, other], &[m, n], out)
    }

    /// Matrix transpose of a 2-D tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::shape("transpose", &[s]));
        }
        let data = kernels::transpose2(&self.data, s[0], s[1]);
        Self::record(Op::Transpose, &[self], &[s[1], s[0]], data)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if kernels::numel(shape) != self.numel() {
            return Err(Error::shape("reshape", &[&self.shape, shape]));
        }
        if shape == self.shape() {
            return Ok(self.clone());
        }
        Self::record(Op::Reshape, &[self], shape, self.to_vec())
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        if shape == self.shape() {
            return Ok(self.clone());
        }
        if !kernels::can_broadcast(&self.shape, shape) {
            return Err(Error::shape("broadcast_to", &[&self.shape, shape]));
        }
        let data = kernels::broadcast_to(&self.data, &self.shape, shape);
        Self::record(Op::BroadcastTo, &[self], shape, data)
    }

    /// Sums over the axes along which `shape` broadcasts into `self`'s shape.
    pub fn sum_to(&self, shape: &[usize]) -> Result<Tensor> {
        if shape == self.shape() {
            return Ok(self.clone());
        }
        if !kernels::can_broadcast(shape, &self.shape) {
            return Err(Error::shape("sum_to", &[&self.shape, shape]));
        }
        let data = kernels::sum_to(&self.data, &self.shape, shape);
        Self::record(Op::SumTo, &[self], shape, data)
    }

    /// Sum of all elements, as a 0-d tensor.
    pub fn sum(&self) -> Tensor {
        self.sum_to(&[]).expect("any shape reduces to a scalar")
    }

    pub fn mean(&self) -> Tensor {
        self.sum().scale(1.0 / self.numel().max(1) as f64)
    }

    /// Sum over one axis, keeping it with size 1.
    pub fn sum_axis_keep(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.shape.len() {
            return Err(Error::shape("sum_axis", &[&self.shape]));
        }
        let mut target = self.shape.to_vec();
        target[axis] = 1;
        self.sum_to(&target)
    }

    /// Inner product of two tensors with the same number of elements.
    pub fn dot(&self, other: &Tensor) -> Result<Tensor> {
        if self.numel() != other.numel() {
            return Err(Error::shape("dot", &[&self.shape, &other.shape]));
        }
        let other = other.reshape(self.shape())?;
        Ok(self.mul(&other)?.sum())
    }

    /// `out[i] = self.flat[indices[i]]`, reshaped to `shape`.
    pub fn gather(&self, indices: Vec<usize>, shape: &[usize]) -> Result<Tensor> {
        self.gather_shared(Rc::new(indices), shape)
    }

    pub(crate) fn gather_shared(&self, idx: Rc<Vec<usize>>, shape: &[usize]) -> Result<Tensor> {
        if kernels::numel(shape) != idx.len() || idx.iter().any(|&i| i >= self.numel()) {
            return Err(Error::shape("gather", &[&self.shape, shape]));
        }
        let data = idx.iter().map(|&i| self.data[i]).collect();
        Self::record(Op::Gather(idx), &[self], shape, data)
    }

    /// `out.flat[indices[i]] += self.flat[i]` into zeros of `shape`.
    pub fn scatter_add(&self, indices: Vec<usize>, shape: &[usize]) -> Result<Tensor> {
        self.scatter_add_shared(Rc::new(indices), shape)
    }

    pub(crate) fn scatter_add_shared(&self, idx: Rc<Vec<usize>>, shape: &[usize]) -> Result<Tensor> {
        let n = kernels::numel(shape);
        if idx.len() != self.numel() || idx.iter().any(|&i| i >= n) {
            return Err(Error::shape("scatter_add", &[&self.shape, shape]));
        }
        let mut data = vec![0.0; n];
        for (&i, &v) in idx.iter().zip(self.data.iter()) {
            data[i] += v;
        }
        Self::record(Op::ScatterAdd(idx), &[self], shape, data)
    }

    /// Selects entries `indices` along the leading axis.
    pub fn index_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let Some(&lead) = self.shape.first() else {
            return Err(Error::shape("index_rows", &[&self.shape]));
        };
        if rows.iter().any(|&r| r >= lead) {
            return Err(Error::shape("index_rows", &[&self.shape]));
        }
        let inner = self.numel() / lead.max(1);
        let idx = rows.iter().flat_map(|&r| r * inner..(r + 1) * inner).collect();
        let mut shape = self.shape.to_vec();
        shape[0] = rows.len();
        self.gather(idx, &shape)
    }

    /// Places the rows of `self` at positions `rows` of a zero tensor with
    /// `lead` rows. Adjoint of [`Tensor::index_rows`].
    pub fn scatter_rows(&self, rows: &[usize], lead: usize) -> Result<Tensor> {
        if self.shape.first() != Some(&rows.len()) || rows.iter().any(|&r| r >= lead) {
            return Err(Error::shape("scatter_rows", &[&self.shape]));
        }
        let inner = self.numel() / rows.len().max(1);
        let idx = rows.iter().flat_map(|&r| r * inner..(r + 1) * inner).collect();
        let mut shape = self.shape.to_vec();
        shape[0] = lead;
        self.scatter_add(idx, &shape)
    }

    /// Contiguous slice `[start, end)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        let s = self.shape();
        if axis >= s.len() || start > end || end > s[axis] {
            return Err(Error::shape("slice", &[s]));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut idx = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            for a in start..end {
                let base = (o * s[axis] + a) * inner;
                idx.extend(base..base + inner);
            }
        }
        let mut shape = s.to_vec();
        shape[axis] = end - start;
        self.gather(idx, &shape)
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", &[]))?;
        let rank = first.shape.len();
        let mut shape = first.shape.to_vec();
        if axis >= rank {
            return Err(Error::shape("concat", &[&first.shape]));
        }
        shape[axis] = 0;
        for p in parts {
            let ok = p.shape.len() == rank
                && (0..rank).all(|d| d == axis || p.shape[d] == first.shape[d]);
            if !ok {
                let shapes: Vec<&[usize]> = parts.iter().map(|t| t.shape()).collect();
                return Err(Error::shape("concat", &shapes));
            }
            shape[axis] += p.shape[axis];
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut acc: Option<Tensor> = None;
        let mut offset = 0;
        for p in parts {
            let len = p.shape[axis];
            let mut idx = Vec::with_capacity(p.numel());
            for o in 0..outer {
                for a in 0..len {
                    let base = (o * shape[axis] + offset + a) * inner;
                    idx.extend(base..base + inner);
                }
            }
            let placed = p.scatter_add(idx, &shape)?;
            acc = Some(match acc {
                Some(a) => a.add(&placed)?,
                None => placed,
            });
            offset += len;
        }
        Ok(acc.expect("non-empty"))
    }

    /// Stride-1 2-D convolution of an `(N, C, H, W)` batch with an
    /// `(O, C, k, k)` kernel and zero padding `pad`.
    pub fn conv2d(&self, weight: &Tensor, pad: usize) -> Result<Tensor> {
        let (x, w) = (self.shape(), weight.shape());
        let ok = x.len() == 4 && w.len() == 4 && x[1] == w[1] && w[2] == w[3] && w[2] > 0;
        if !ok || x[2] + 2 * pad < w[2] || x[3] + 2 * pad < w[2] {
            return Err(Error::shape("conv2d", &[x, w]));
        }
        let g = ConvGeom {
            batch: x[0],
            in_ch: x[1],
            out_ch: w[0],
            h: x[2],
            w: x[3],
            k: w[2],
            pad,
        };
        self.conv2d_geom(weight, g)
    }

    pub(crate) fn conv2d_geom(&self, weight: &Tensor, g: ConvGeom) -> Result<Tensor> {
        if self.shape() != g.in_shape().as_slice() || weight.shape() != g.weight_shape().as_slice() {
            return Err(Error::shape("conv2d", &[self.shape(), weight.shape()]));
        }
        let data = kernels::conv2d(&g, &self.data, &weight.data);
        Self::record(Op::Conv2d(g), &[self, weight], &g.out_shape(), data)
    }

    pub(crate) fn conv2d_input_grad(gout: &Tensor, weight: &Tensor, g: ConvGeom) -> Result<Tensor> {
        if gout.shape() != g.out_shape().as_slice() || weight.shape() != g.weight_shape().as_slice() {
            return Err(Error::shape("conv2d_input_grad", &[gout.shape(), weight.shape()]));
        }
        let data = kernels::conv2d_input_grad(&g, &gout.data, &weight.data);
        Self::record(Op::Conv2dInputGrad(g), &[gout, weight], &g.in_shape(), data)
    }

    pub(crate) fn conv2d_weight_grad(x: &Tensor, gout: &Tensor, g: ConvGeom) -> Result<Tensor> {
        if x.shape() != g.in_shape().as_slice() || gout.shape() != g.out_shape().as_slice() {
            return Err(Error::shape("conv2d_weight_grad", &[x.shape(), gout.shape()]));
        }
        let data = kernels::conv2d_weight_grad(&g, &x.data, &gout.data);
        Self::record(Op::Conv2dWeightGrad(g), &[x, gout], &g.weight_shape(), data)
    }

    /// Non-overlapping `k×k` max pooling of an `(N, C, H, W)` batch.
    pub fn max_pool2d(&self, k: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 || k == 0 || s[2] < k || s[3] < k {
            return Err(Error::shape("max_pool2d", &[s]));
        }
        let (idx, shape) = kernels::max_pool_indices(s, &self.data, k);
        self.gather(idx, &shape)
    }

    /// Bilinear sampling of an `(N, C, H, W)` batch at pixel coordinates
    /// `(gx, gy)`, both of shape `(Ho, Wo)` and shared by every image.
    /// Samples outside the canvas read zero.
    pub fn grid_sample(&self, gx: &Tensor, gy: &Tensor) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 || gx.shape().len() != 2 || gx.shape() != gy.shape() {
            return Err(Error::shape("grid_sample", &[s, gx.shape(), gy.shape()]));
        }
        let (oh, ow) = (gx.shape()[0], gx.shape()[1]);
        let data = kernels::grid_sample(s, &self.data, &gx.data, &gy.data, (oh, ow));
        Self::record(Op::GridSample, &[self, gx, gy], &[s[0], s[1], oh, ow], data)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self) -> Result<Tensor> {
        let s = self.shape();
        let Some(&n) = s.last() else {
            return Err(Error::shape("log_softmax", &[s]));
        };
        let rows = self.numel() / n.max(1);
        let maxes: Vec<f64> = (0..rows)
            .map(|r| self.data[r * n..(r + 1) * n].iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let mut keep = s.to_vec();
        *keep.last_mut().expect("rank >= 1") = 1;
        let shift = Tensor::new(&keep, maxes)?;
        let shifted = self.sub(&shift)?;
        let lse = shifted.exp().sum_to(&keep)?.log();
        shifted.sub(&lse)
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Tensor> {
        Ok(self.log_softmax()?.exp())
    }

    /// Mean negative log-likelihood of `labels` under row-wise log-probabilities.
    pub fn nll_loss(&self, labels: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("nll_loss", &[s, &[labels.len()]]));
        }
        let classes = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidInput(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let idx = labels.iter().enumerate().map(|(r, &l)| r * classes + l).collect();
        Ok(self.gather(idx, &[labels.len()])?.mean().neg())
    }

    /// Softmax cross-entropy of row-wise logits against `labels`.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor> {
        self.log_softmax()?.nll_loss(labels)
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
