//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Operations are recorded in execution order, so node ids are already a
//! topological order; backward walks them once in reverse. A node that no
//! parameter feeds into is a constant and never receives a gradient.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::math::kernels::{self, gemm};
use crate::math::real::Real;
use crate::math::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product for an op implemented outside the tape.
pub trait CustomOp<T: Real> {
    fn name(&self) -> &'static str;

    /// Gradients for each input given the output gradient.
    fn backward(&self, grad: &Tensor<T>, inputs: &[&Tensor<T>], output: &Tensor<T>)
        -> Vec<Option<Tensor<T>>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Exp,
    Log,
    Sqrt,
    Square,
    Softplus,
    Sigmoid,
    Tanh,
    Relu,
    Sin,
    Cos,
}

impl Unary {
    fn apply<T: Real>(self, x: T) -> T {
        match self {
            Unary::Neg => -x,
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
            Unary::Softplus => kernels::softplus(x),
            Unary::Sigmoid => kernels::sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Relu => x.max(T::zero()),
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
        }
    }

    /// d/dx given the input and output values.
    fn deriv<T: Real>(self, x: T, y: T) -> T {
        match self {
            Unary::Neg => -T::one(),
            Unary::Exp => y,
            Unary::Log => T::one() / x,
            Unary::Sqrt => {
                if y > T::zero() {
                    T::c(0.5) / y
                } else {
                    T::zero()
                }
            }
            Unary::Square => T::c(2.0) * x,
            Unary::Softplus => kernels::sigmoid(x),
            Unary::Sigmoid => y * (T::one() - y),
            Unary::Tanh => T::one() - y * y,
            Unary::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
        }
    }
}

enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Unary(Var, Unary),
    MatMul { a: Var, b: Var, tb: bool },
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    SumRows(Var),
    LogSoftmax(Var),
    Softmax(Var),
    Gather { x: Var, idx: Arc<Vec<usize>> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize, end: usize },
    BroadcastRows(Var),
    Reshape(Var),
    Transpose(Var),
    NormalizeRows(Var),
    NormRows(Var),
    Conv2d(Box<ConvRecord<T>>),
    Upsample2x(Var),
    SpatialMean(Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

struct ConvRecord<T> {
    x: Var,
    w: Var,
    b: Var,
    stride: usize,
    pad: usize,
    k: usize,
    in_dims: [usize; 3],
    out_hw: [usize; 2],
    /// im2col buffer; empty for pointwise convs, which read `x` directly.
    cols: Vec<T>,
}

struct Node<T: Real> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-owner record of a differentiable computation.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, exactly zero when `v` did not reach the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        match self.grads.get_mut(v.0).and_then(|g| g.take()) {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn acc<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(e) => e.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => {
            let c = *shape.last().unwrap();
            (shape.iter().product::<usize>() / c.max(1), c)
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param_arc(&mut self, value: Arc<Tensor<T>>) -> Var {
        self.push_arc(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_arc(&mut self, value: Arc<Tensor<T>>) -> Var {
        self.push_arc(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Tensor<T>> {
        self.nodes[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value_arc(v);
        self.constant_arc(value)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>, name: &str) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "{name}: shape mismatch");
        let out = va.zip_map(vb, f);
        let rg = self.rg(&[a, b]);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b), "div")
    }

    /// `x[.., M] + b[M]` broadcast over leading dims.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(b));
        let (_, c) = rows_cols(vx.shape());
        assert_eq!(vb.len(), c, "add_row: bias length {} vs cols {}", vb.len(), c);
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &bb) in row.iter_mut().zip(vb.data()) {
                *o += bb;
            }
        }
        let rg = self.rg(&[x, b]);
        self.push(out, Op::AddRow(x, b), rg)
    }

    /// `x[N, M] * c[N]` scaling each row.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Var {
        let (vx, vc) = (self.value(x), self.value(c));
        let (r, cols) = rows_cols(vx.shape());
        assert_eq!(vc.len(), r, "mul_col: {} scales for {} rows", vc.len(), r);
        let mut out = vx.clone();
        for (row, &s) in out.data_mut().chunks_mut(cols).zip(vc.data()) {
            row.iter_mut().for_each(|o| *o *= s);
        }
        let rg = self.rg(&[x, c]);
        self.push(out, Op::MulCol(x, c), rg)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).scale(s);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v + s);
        let rg = self.rg(&[x]);
        self.push(out, Op::AddScalar(x), rg)
    }

    pub fn unary(&mut self, x: Var, u: Unary) -> Var {
        let out = self.value(x).map(|v| u.apply(v));
        let rg = self.rg(&[x]);
        self.push(out, Op::Unary(x, u), rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Neg)
    }
    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }
    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }
    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }
    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sin)
    }
    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Cos)
    }

    /// `a[N, K] @ b[K, M]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false)
    }

    /// `a[N, K] @ b[M, K]^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, tb: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ndim(), 2, "matmul: lhs must be 2D, got {:?}", va.shape());
        assert_eq!(vb.ndim(), 2, "matmul: rhs must be 2D, got {:?}", vb.shape());
        let (n, k) = (va.shape()[0], va.shape()[1]);
        let (kb, m) = if tb {
            (vb.shape()[1], vb.shape()[0])
        } else {
            (vb.shape()[0], vb.shape()[1])
        };
        assert_eq!(k, kb, "matmul: inner dims {:?} x {:?}", va.shape(), vb.shape());
        let mut out = vec![T::zero(); n * m];
        gemm(false, tb, n, k, m, va.data(), vb.data(), &mut out, false);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_parts(vec![n, m], out), Op::MatMul { a, b, tb }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum() / T::c(v.len().max(1) as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Sum over the last dim: `[N, M] -> [N]`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (r, c) = rows_cols(v.shape());
        let out: Vec<T> = v.data().chunks(c).map(|row| row.iter().copied().sum()).collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(vec![r], out), Op::SumCols(x), rg)
    }

    /// Sum over rows: `[N, M] -> [M]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (_, c) = rows_cols(v.shape());
        let mut out = vec![T::zero(); c];
        for row in v.data().chunks(c) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(vec![c], out), Op::SumRows(x), rg)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (_, c) = rows_cols(v.shape());
        let out = kernels::log_softmax_rows(v.data(), c);
        let shape = v.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::LogSoftmax(x), rg)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (_, c) = rows_cols(v.shape());
        let out: Vec<T> = kernels::log_softmax_rows(v.data(), c)
            .into_iter()
            .map(|l| l.exp())
            .collect();
        let shape = v.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::Softmax(x), rg)
    }

    /// Select rows of `x` (first dim) by index.
    pub fn gather_rows(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Var {
        let v = self.value(x);
        let rows = v.shape().first().copied().unwrap_or(1);
        let inner = v.len() / rows.max(1);
        let mut out = Vec::with_capacity(idx.len() * inner);
        for &i in idx.iter() {
            assert!(i < rows, "gather_rows: index {i} out of {rows}");
            out.extend_from_slice(&v.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = v.shape().to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        shape[0] = idx.len();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::Gather { x, idx }, rg)
    }

    /// Concatenate `[N, Mi]` matrices along the last dim.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "concat_cols: no inputs");
        let n = self.value(xs[0]).rows();
        let widths: Vec<usize> = xs
            .iter()
            .map(|&v| {
                let t = self.value(v);
                assert_eq!(t.ndim(), 2, "concat_cols: inputs must be 2D");
                assert_eq!(t.rows(), n, "concat_cols: row mismatch");
                t.cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![T::zero(); n * total];
        let mut off = 0;
        for (&v, &w) in xs.iter().zip(&widths) {
            let t = self.value(v);
            for i in 0..n {
                out[i * total + off..i * total + off + w].copy_from_slice(t.row(i));
            }
            off += w;
        }
        let rg = self.rg(xs);
        self.push(Tensor::from_parts(vec![n, total], out), Op::ConcatCols(xs.to_vec()), rg)
    }

    /// Stack `[Ni, M]` (or `[M]` as one row) along the first dim.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "concat_rows: no inputs");
        let m = self.value(xs[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &v in xs {
            let t = self.value(v);
            assert_eq!(t.cols(), m, "concat_rows: column mismatch");
            rows += t.len() / m.max(1);
            out.extend_from_slice(t.data());
        }
        let rg = self.rg(xs);
        self.push(Tensor::from_parts(vec![rows, m], out), Op::ConcatRows(xs.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let v = self.value(x);
        let (r, c) = rows_cols(v.shape());
        assert!(start <= end && end <= c, "slice_cols: {start}..{end} of {c}");
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for row in v.data().chunks(c) {
            out.extend_from_slice(&row[start..end]);
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(vec![r, w], out), Op::SliceCols { x, start, end }, rg)
    }

    /// Repeat a vector `[M]` into `n` rows.
    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Var {
        let v = self.value(x);
        let m = v.len();
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(v.data());
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(vec![n, m], out), Op::BroadcastRows(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone();
        let out = v.reshape(shape).expect("reshape: element count");
        let rg = self.rg(&[x]);
        self.push(out, Op::Reshape(x), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        let rg = self.rg(&[x]);
        self.push(out, Op::Transpose(x), rg)
    }

    /// Scale each row to unit L2 norm. Callers must rule out zero rows.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (_, c) = rows_cols(v.shape());
        let mut out = v.clone();
        for row in out.data_mut().chunks_mut(c) {
            let n = row.iter().map(|&a| a * a).sum::<T>().sqrt().max(T::min_positive_value());
            row.iter_mut().for_each(|a| *a /= n);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::NormalizeRows(x), rg)
    }

    /// Row L2 norms `[N, M] -> [N]`; the gradient at a zero row is zero.
    pub fn norm_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (r, c) = rows_cols(v.shape());
        let out: Vec<T> = v
            .data()
            .chunks(c)
            .map(|row| row.iter().map(|&a| a * a).sum::<T>().sqrt())
            .collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(vec![r], out), Op::NormRows(x), rg)
    }

    /// 2D convolution of a single `[C, H, W]` map with `[Co, C, k, k]` weights.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(vx.ndim(), 3, "conv2d: input must be [C, H, W], got {:?}", vx.shape());
        assert_eq!(vw.ndim(), 4, "conv2d: weight must be [Co, C, k, k]");
        let (c, h, wd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let (co, ci, k) = (vw.shape()[0], vw.shape()[1], vw.shape()[2]);
        assert_eq!(ci, c, "conv2d: channel mismatch {ci} vs {c}");
        assert_eq!(vb.len(), co, "conv2d: bias length");
        assert!(stride >= 1);
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d: input smaller than kernel");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let p = ho * wo;
        let pointwise = k == 1 && stride == 1 && pad == 0;
        let cols = if pointwise {
            Vec::new()
        } else {
            kernels::im2col(vx.data(), c, h, wd, k, stride, pad, ho, wo)
        };
        let src: &[T] = if pointwise { vx.data() } else { &cols };
        let mut out = vec![T::zero(); co * p];
        for (o, &bb) in out.chunks_mut(p).zip(vb.data()) {
            o.iter_mut().for_each(|v| *v = bb);
        }
        gemm(false, false, co, c * k * k, p, vw.data(), src, &mut out, true);
        let rg = self.rg(&[x, w, b]);
        let rec = ConvRecord {
            x,
            w,
            b,
            stride,
            pad,
            k,
            in_dims: [c, h, wd],
            out_hw: [ho, wo],
            cols,
        };
        self.push(Tensor::from_parts(vec![co, ho, wo], out), Op::Conv2d(Box::new(rec)), rg)
    }

    /// Nearest-neighbour 2x upsampling of a `[C, H, W]` map.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let v = self.value(x);
        assert_eq!(v.ndim(), 3, "upsample2x: expects [C, H, W]");
        let (c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let mut out = vec![T::zero(); c * 4 * h * w];
        for ci in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ci * 2 * h + y) * 2 * w + xx] = v.data()[(ci * h + y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(vec![c, 2 * h, 2 * w], out), Op::Upsample2x(x), rg)
    }

    /// Mean over spatial dims: `[C, H, W] -> [C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        assert_eq!(v.ndim(), 3, "spatial_mean: expects [C, H, W]");
        let (c, p) = (v.shape()[0], v.shape()[1] * v.shape()[2]);
        let inv = T::one() / T::c(p as f64);
        let out: Vec<T> = v.data().chunks(p).map(|ch| ch.iter().copied().sum::<T>() * inv).collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(vec![c], out), Op::SpatialMean(x), rg)
    }

    /// Record an externally computed op with its own backward.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        let rg = self.rg(inputs);
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Gradients of a scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let v = self.value(loss);
        if v.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                v.shape()
            )));
        }
        let seed = Tensor::full(v.shape(), T::one());
        Ok(self.backward_seeded(vec![(loss, seed)]))
    }

    /// Backward pass from arbitrary output gradients.
    pub fn backward_seeded(&self, seeds: Vec<(Var, Tensor<T>)>) -> Gradients<T> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        let mut top = 0;
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.shape(v), "seed shape mismatch");
            top = top.max(v.0 + 1);
            acc(&mut grads, v, g);
        }
        for i in (0..top).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let y = &*node.value;
        let val = |v: Var| &*self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if want(*a) {
                    acc(grads, *a, g.clone());
                }
                if want(*b) {
                    acc(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    acc(grads, *a, g.clone());
                }
                if want(*b) {
                    acc(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    acc(grads, *a, g.zip_map(val(*b), |x, y| x * y));
                }
                if want(*b) {
                    acc(grads, *b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                let vb = val(*b);
                if want(*a) {
                    acc(grads, *a, g.zip_map(vb, |x, y| x / y));
                }
                if want(*b) {
                    let t = g.zip_map(y, |x, q| x * q);
                    acc(grads, *b, t.zip_map(vb, |x, d| -x / d));
                }
            }
            Op::AddRow(x, b) => {
                if want(*x) {
                    acc(grads, *x, g.clone());
                }
                if want(*b) {
                    let c = val(*b).len();
                    let mut gb = vec![T::zero(); c];
                    for row in g.data().chunks(c) {
                        for (o, &v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    acc(grads, *b, Tensor::from_parts(val(*b).shape().to_vec(), gb));
                }
            }
            Op::MulCol(x, c) => {
                let (vx, vc) = (val(*x), val(*c));
                let cols = rows_cols(vx.shape()).1;
                if want(*x) {
                    let mut gx = g.clone();
                    for (row, &s) in gx.data_mut().chunks_mut(cols).zip(vc.data()) {
                        row.iter_mut().for_each(|o| *o *= s);
                    }
                    acc(grads, *x, gx);
                }
                if want(*c) {
                    let gc: Vec<T> = g
                        .data()
                        .chunks(cols)
                        .zip(vx.data().chunks(cols))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(&a, &b)| a * b).sum())
                        .collect();
                    acc(grads, *c, Tensor::from_parts(vc.shape().to_vec(), gc));
                }
            }
            Op::Scale(x, s) => {
                if want(*x) {
                    acc(grads, *x, g.scale(*s));
                }
            }
            Op::AddScalar(x) => {
                if want(*x) {
                    acc(grads, *x, g.clone());
                }
            }
            Op::Unary(x, u) => {
                if want(*x) {
                    let vx = val(*x);
                    let data = g
                        .data()
                        .iter()
                        .zip(vx.data())
                        .zip(y.data())
                        .map(|((&gg, &xx), &yy)| gg * u.deriv(xx, yy))
                        .collect();
                    acc(grads, *x, Tensor::from_parts(vx.shape().to_vec(), data));
                }
            }
            Op::MatMul { a, b, tb } => {
                let (va, vb) = (val(*a), val(*b));
                let (n, k) = (va.shape()[0], va.shape()[1]);
                let m = y.shape()[1];
                if want(*a) {
                    let mut ga = vec![T::zero(); n * k];
                    // tb: B is [m, k] so dA = G B; else B is [k, m] so dA = G B^T
                    gemm(false, !*tb, n, m, k, g.data(), vb.data(), &mut ga, false);
                    acc(grads, *a, Tensor::from_parts(vec![n, k], ga));
                }
                if want(*b) {
                    if *tb {
                        let mut gbm = vec![T::zero(); m * k];
                        gemm(true, false, m, n, k, g.data(), va.data(), &mut gbm, false);
                        acc(grads, *b, Tensor::from_parts(vec![m, k], gbm));
                    } else {
                        let mut gbm = vec![T::zero(); k * m];
                        gemm(true, false, k, n, m, va.data(), g.data(), &mut gbm, false);
                        acc(grads, *b, Tensor::from_parts(vec![k, m], gbm));
                    }
                }
            }
            Op::Sum(x) => {
                if want(*x) {
                    acc(grads, *x, Tensor::full(val(*x).shape(), g.item()));
                }
            }
            Op::Mean(x) => {
                if want(*x) {
                    let vx = val(*x);
                    let s = g.item() / T::c(vx.len().max(1) as f64);
                    acc(grads, *x, Tensor::full(vx.shape(), s));
                }
            }
            Op::SumCols(x) => {
                if want(*x) {
                    let vx = val(*x);
                    let c = rows_cols(vx.shape()).1;
                    let mut gx = Vec::with_capacity(vx.len());
                    for &gg in g.data() {
                        gx.extend(std::iter::repeat(gg).take(c));
                    }
                    acc(grads, *x, Tensor::from_parts(vx.shape().to_vec(), gx));
                }
            }
            Op::SumRows(x) => {
                if want(*x) {
                    let vx = val(*x);
                    let r = vx.len() / g.len().max(1);
                    let mut gx = Vec::with_capacity(vx.len());
                    for _ in 0..r {
                        gx.extend_from_slice(g.data());
                    }
                    acc(grads, *x, Tensor::from_parts(vx.shape().to_vec(), gx));
                }
            }
            Op::LogSoftmax(x) => {
                if want(*x) {
                    let c = rows_cols(y.shape()).1;
                    let mut gx = g.clone();
                    for (gr, yr) in gx.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                        let s: T = gr.iter().copied().sum();
                        for (o, &l) in gr.iter_mut().zip(yr) {
                            *o -= l.exp() * s;
                        }
                    }
                    acc(grads, *x, gx);
                }
            }
            Op::Softmax(x) => {
                if want(*x) {
                    let c = rows_cols(y.shape()).1;
                    let mut gx = g.clone();
                    for (gr, yr) in gx.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                        let s: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for (o, &p) in gr.iter_mut().zip(yr) {
                            *o = p * (*o - s);
                        }
                    }
                    acc(grads, *x, gx);
                }
            }
            Op::Gather { x, idx } => {
                if want(*x) {
                    let vx = val(*x);
                    let rows = vx.shape().first().copied().unwrap_or(1);
                    let inner = vx.len() / rows.max(1);
                    let mut gx = vec![T::zero(); vx.len()];
                    for (j, &i) in idx.iter().enumerate() {
                        let src = &g.data()[j * inner..(j + 1) * inner];
                        for (o, &v) in gx[i * inner..(i + 1) * inner].iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                    acc(grads, *x, Tensor::from_parts(vx.shape().to_vec(), gx));
                }
            }
            Op::ConcatCols(xs) => {
                let total = y.cols();
                let n = y.rows();
                let mut off = 0;
                for &v in xs {
                    let w = val(v).cols();
                    if want(v) {
                        let mut gx = Vec::with_capacity(n * w);
                        for r in 0..n {
                            gx.extend_from_slice(&g.data()[r * total + off..r * total + off + w]);
                        }
                        acc(grads, v, Tensor::from_parts(val(v).shape().to_vec(), gx));
                    }
                    off += w;
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &v in xs {
                    let len = val(v).len();
                    if want(v) {
                        let gx = g.data()[off..off + len].to_vec();
                        acc(grads, v, Tensor::from_parts(val(v).shape().to_vec(), gx));
                    }
                    off += len;
                }
            }
            Op::SliceCols { x, start, end } => {
                if want(*x) {
                    let vx = val(*x);
                    let c = rows_cols(vx.shape()).1;
                    let w = end - start;
                    let mut gx = vec![T::zero(); vx.len()];
                    for (row, gr) in gx.chunks_mut(c).zip(g.data().chunks(w)) {
                        row[*start..*end].copy_from_slice(gr);
                    }
                    acc(grads, *x, Tensor::from_parts(vx.shape().to_vec(), gx));
                }
            }
            Op::BroadcastRows(x) => {
                if want(*x) {
                    let vx = val(*x);
                    let m = vx.len();
                    let mut gx = vec![T::zero(); m];
                    for row in g.data().chunks(m) {
                        for (o, &v) in gx.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    acc(grads, *x, Tensor::from_parts(vx.shape().to_vec(), gx));
                }
            }
            Op::Reshape(x) => {
                if want(*x) {
                    let gx = Tensor::from_parts(val(*x).shape().to_vec(), g.data().to_vec());
                    acc(grads, *x, gx);
                }
            }
            Op::Transpose(x) => {
                if want(*x) {
                    acc(grads, *x, g.transpose());
                }
            }
            Op::NormalizeRows(x) => {
                if want(*x) {
                    let vx = val(*x);
                    let c = rows_cols(vx.shape()).1;
                    let mut gx = g.clone();
                    for ((gr, yr), xr) in gx
                        .data_mut()
                        .chunks_mut(c)
                        .zip(y.data().chunks(c))
                        .zip(vx.data().chunks(c))
                    {
                        let n = xr.iter().map(|&a| a * a).sum::<T>().sqrt().max(T::min_positive_value());
                        let d: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for (o, &yy) in gr.iter_mut().zip(yr) {
                            *o = (*o - yy * d) / n;
                        }
                    }
                    acc(grads, *x, gx);
                }
            }
            Op::NormRows(x) => {
                if want(*x) {
                    let vx = val(*x);
                    let c = rows_cols(vx.shape()).1;
                    let mut gx = vx.clone();
                    for ((row, &gg), &n) in gx.data_mut().chunks_mut(c).zip(g.data()).zip(y.data()) {
                        if n > T::zero() {
                            row.iter_mut().for_each(|a| *a = *a * gg / n);
                        } else {
                            row.iter_mut().for_each(|a| *a = T::zero());
                        }
                    }
                    acc(grads, *x, gx);
                }
            }
            Op::Conv2d(rec) => self.backprop_conv(rec, g, grads),
            Op::Upsample2x(x) => {
                if want(*x) {
                    let vx = val(*x);
                    let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
                    let mut gx = vec![T::zero(); vx.len()];
                    for ci in 0..c {
                        for yy in 0..2 * h {
                            for xx in 0..2 * w {
                                gx[(ci * h + yy / 2) * w + xx / 2] +=
                                    g.data()[(ci * 2 * h + yy) * 2 * w + xx];
                            }
                        }
                    }
                    acc(grads, *x, Tensor::from_parts(vx.shape().to_vec(), gx));
                }
            }
            Op::SpatialMean(x) => {
                if want(*x) {
                    let vx = val(*x);
                    let p = vx.shape()[1] * vx.shape()[2];
                    let inv = T::one() / T::c(p as f64);
                    let mut gx = Vec::with_capacity(vx.len());
                    for &gg in g.data() {
                        gx.extend(std::iter::repeat(gg * inv).take(p));
                    }
                    acc(grads, *x, Tensor::from_parts(vx.shape().to_vec(), gx));
                }
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
                let gs = op.backward(g, &ins, y);
                assert_eq!(gs.len(), inputs.len(), "custom op {} gradient arity", op.name());
                for (&v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        if want(v) {
                            assert_eq!(gi.shape(), val(v).shape(), "custom op {} grad shape", op.name());
                            acc(grads, v, gi);
                        }
                    }
                }
            }
        }
    }

    fn backprop_conv(&self, rec: &ConvRecord<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let val = |v: Var| &*self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].requires_grad;
        let [c, h, w] = rec.in_dims;
        let [ho, wo] = rec.out_hw;
        let p = ho * wo;
        let k = rec.k;
        let ckk = c * k * k;
        let vw = val(rec.w);
        let co = vw.shape()[0];
        let src: &[T] = if rec.cols.is_empty() { val(rec.x).data() } else { &rec.cols };
        if want(rec.w) {
            let mut gw = vec![T::zero(); co * ckk];
            gemm(false, true, co, p, ckk, g.data(), src, &mut gw, false);
            acc(grads, rec.w, Tensor::from_parts(vw.shape().to_vec(), gw));
        }
        if want(rec.b) {
            let gb: Vec<T> = g.data().chunks(p).map(|ch| ch.iter().copied().sum()).collect();
            acc(grads, rec.b, Tensor::from_parts(vec![co], gb));
        }
        if want(rec.x) {
            let mut gcols = vec![T::zero(); ckk * p];
            gemm(true, false, ckk, co, p, vw.data(), g.data(), &mut gcols, false);
            let gx = if rec.cols.is_empty() {
                gcols
            } else {
                kernels::col2im(&gcols, c, h, w, k, rec.stride, rec.pad, ho, wo)
            };
            acc(grads, rec.x, Tensor::from_parts(vec![c, h, w], gx));
        }
    }
}
