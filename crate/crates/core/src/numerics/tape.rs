use std::sync::Arc;

use super::conv::{self, Conv2dShape, ConvT2dShape};
use super::tensor::shape_numel;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A linear operator with a hand-written adjoint, recorded as a single tape op.
///
/// Used for data movement that depends on constant side inputs (flows,
/// validity masks, frame offsets): the tape only needs `apply` and `adjoint`.
pub trait LinearMap<S: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    fn apply(&self, input: &Tensor<S>) -> Result<Tensor<S>>;

    /// `A^T * grad_out`, shaped like the input.
    fn adjoint(&self, grad_out: &Tensor<S>, input_shape: &[usize]) -> Result<Tensor<S>>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Sigmoid,
    Relu,
    LeakyRelu(f64),
    Tanh,
    Abs,
    Neg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    AbsSum,
}

enum Op<S: Scalar> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, shape: Conv2dShape },
    ConvT2d { x: Var, w: Var, b: Option<Var>, shape: ConvT2dShape },
    Unary { x: Var, kind: Unary },
    Binary { lhs: Var, rhs: Var, kind: Binary },
    Affine { x: Var, scale: S },
    Reduce { x: Var, kind: Reduce, axes: Vec<usize> },
    Matmul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Transpose { x: Var, batch: usize, rows: usize, cols: usize },
    Reshape { x: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Linear { x: Var, map: Arc<dyn LinearMap<S>> },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    requires_grad: bool,
    op: Op<S>,
}

/// Records operations in execution order and replays them in exact reverse
/// order for reverse-mode differentiation.
///
/// Gradients accumulate in a fixed order, so repeated runs are bit-identical.
/// Ops whose inputs are all constants are recorded as constants.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf; its gradient is kept after [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` target with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor<S>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Copies a value into a new constant, cutting it off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn push(&mut self, value: Tensor<S>, requires_grad: bool, op: Op<S>) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op_name: &'static str, value: Tensor<S>, inputs: &[Var], op: Op<S>) -> Result<Var> {
        value.ensure_finite(op_name)?;
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        Ok(self.push(value, requires_grad, op))
    }

    // ----- ops -----

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let shape = Conv2dShape::infer(self.value(x).shape(), self.value(w).shape(), stride, pad)?;
        let bias = b.map(|b| self.value(b));
        if let Some(bias) = bias {
            if bias.shape() != [shape.out_channels] {
                return Err(Error::shape("conv2d", format!("bias shape {:?}", bias.shape())));
            }
        }
        let out = conv::conv2d_forward(&shape, self.value(x).data(), self.value(w).data(), bias.map(|t| t.data()));
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.record("conv2d", out, &inputs, Op::Conv2d { x, w, b, shape })
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let shape = ConvT2dShape::infer(self.value(x).shape(), self.value(w).shape(), stride, pad)?;
        let bias = b.map(|b| self.value(b));
        if let Some(bias) = bias {
            if bias.shape() != [shape.geom.channels] {
                return Err(Error::shape("conv_transpose2d", format!("bias shape {:?}", bias.shape())));
            }
        }
        let out = conv::conv_transpose2d_forward(
            &shape,
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|t| t.data()),
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.record("conv_transpose2d", out, &inputs, Op::ConvT2d { x, w, b, shape })
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| unary_forward(kind, v));
        self.record(unary_name(kind), out, &[x], Op::Unary { x, kind })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Result<Var> {
        self.unary(Unary::LeakyRelu(alpha), x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Tanh, x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Abs, x)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Neg, x)
    }

    /// Elementwise op over equal shapes, or a one-element operand against any tensor.
    pub fn binary(&mut self, kind: Binary, lhs: Var, rhs: Var) -> Result<Var> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        let f = |x: S, y: S| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let out = if a.shape() == b.shape() {
            a.zip_map(b, f)?
        } else if b.numel() == 1 {
            let y = b.data()[0];
            a.map(|x| f(x, y))
        } else if a.numel() == 1 {
            let x = a.data()[0];
            b.map(|y| f(x, y))
        } else {
            return Err(Error::shape(
                binary_name(kind),
                format!("incompatible shapes {:?} and {:?}", a.shape(), b.shape()),
            ));
        };
        self.record(binary_name(kind), out, &[lhs, rhs], Op::Binary { lhs, rhs, kind })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// `x * scale` with a constant factor.
    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        let s = S::lit(scale);
        let out = self.value(x).map(|v| v * s);
        self.record("scale", out, &[x], Op::Affine { x, scale: s })
    }

    /// Reduces over `axes` (removed from the shape); an empty `axes` reduces everything.
    pub fn reduce(&mut self, kind: Reduce, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let axes = normalize_axes(&shape, axes)?;
        let out = reduce_forward(kind, self.value(x), &axes);
        self.record(reduce_name(kind), out, &[x], Op::Reduce { x, kind, axes })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.reduce(Reduce::Sum, x, &[])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.reduce(Reduce::Mean, x, &[])
    }

    pub fn abs_sum(&mut self, x: Var) -> Result<Var> {
        self.reduce(Reduce::AbsSum, x, &[])
    }

    /// `[M, K] x [K, N]`, or batched `[B, M, K] x [B, K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let (batch, m, k, k2, n) = match (sa, sb) {
            ([m, k], [k2, n]) => (1, *m, *k, *k2, *n),
            ([ba, m, k], [bb, k2, n]) if ba == bb => (*ba, *m, *k, *k2, *n),
            _ => return Err(Error::shape("matmul", format!("unsupported operand shapes {sa:?} x {sb:?}"))),
        };
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner dimensions differ: {sa:?} x {sb:?}")));
        }
        let mut out_shape = if sa.len() == 3 { vec![batch] } else { vec![] };
        out_shape.extend([m, n]);
        let mut out = vec![S::zero(); batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            S::gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                false,
                &db[i * k * n..(i + 1) * k * n],
                false,
                S::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let out = Tensor::new(out_shape, out)?;
        self.record("matmul", out, &[a, b], Op::Matmul { a, b, batch, m, k, n })
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("transpose", format!("rank {} < 2", shape.len())));
        }
        let (rows, cols) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let batch = shape_numel(&shape[..shape.len() - 2]);
        let out = transpose_data(self.value(x).data(), batch, rows, cols);
        let mut out_shape = shape.clone();
        let r = out_shape.len();
        out_shape.swap(r - 2, r - 1);
        let out = Tensor::new(out_shape, out)?;
        self.record("transpose", out, &[x], Op::Transpose { x, batch, rows, cols })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.record("reshape", out, &[x], Op::Reshape { x })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::Axis { axis, rank: base.len() });
        }
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let outer = shape_numel(&base[..axis]);
        let tail = shape_numel(&base[axis + 1..]);
        let mut out = Vec::with_capacity(outer * total * tail);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape()[axis] * tail;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, out)?;
        self.record("concat", out, parts, Op::Concat { parts: parts.to_vec(), axis })
    }

    pub fn linear(&mut self, x: Var, map: Arc<dyn LinearMap<S>>) -> Result<Var> {
        let out = map.apply(self.value(x))?;
        let name = map.name();
        self.record(name, out, &[x], Op::Linear { x, map })
    }

    // ----- backward -----

    /// Reverse-mode sweep from a one-element `loss`. Leaf gradients are kept
    /// and can be read with [`Tape::grad`]; interior gradients are dropped.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g)?;
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<S>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(contribution) {
                    *a += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, i: usize, g: &[S]) -> Result<()> {
        // Temporarily move the op out so `self` stays mutably borrowable.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let result = self.propagate_op(i, &op, g);
        self.nodes[i].op = op;
        result
    }

    fn propagate_op(&mut self, i: usize, op: &Op<S>, g: &[S]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, shape } => {
                let (dx, dw, db) = conv::conv2d_backward(
                    shape,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    self.wants(*x),
                    self.wants(*w),
                    b.is_some_and(|b| self.wants(b)),
                );
                self.accumulate_opt(*x, dx);
                self.accumulate_opt(*w, dw);
                if let Some(b) = b {
                    self.accumulate_opt(*b, db);
                }
            }
            Op::ConvT2d { x, w, b, shape } => {
                let (dx, dw, db) = conv::conv_transpose2d_backward(
                    shape,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    self.wants(*x),
                    self.wants(*w),
                    b.is_some_and(|b| self.wants(b)),
                );
                self.accumulate_opt(*x, dx);
                self.accumulate_opt(*w, dw);
                if let Some(b) = b {
                    self.accumulate_opt(*b, db);
                }
            }
            Op::Unary { x, kind } => {
                let xin = self.value(*x).data();
                let y = self.nodes[i].value.data();
                let d: Vec<S> = g
                    .iter()
                    .zip(xin.iter().zip(y))
                    .map(|(&g, (&x, &y))| g * unary_derivative(*kind, x, y))
                    .collect();
                self.accumulate(*x, d);
            }
            Op::Binary { lhs, rhs, kind } => self.binary_backward(*lhs, *rhs, *kind, g),
            Op::Affine { x, scale } => {
                let d = g.iter().map(|&g| g * *scale).collect();
                self.accumulate(*x, d);
            }
            Op::Reduce { x, kind, axes } => {
                let d = reduce_backward(*kind, self.value(*x), axes, g);
                self.accumulate(*x, d);
            }
            Op::Matmul { a, b, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.wants(*a) {
                    let bd = self.value(*b).data();
                    let mut da = vec![S::zero(); batch * m * k];
                    for t in 0..*batch {
                        S::gemm(m, n, k, &g[t * m * n..], false, &bd[t * k * n..], true, S::zero(), &mut da[t * m * k..]);
                    }
                    self.accumulate(*a, da);
                }
                if self.wants(*b) {
                    let ad = self.value(*a).data();
                    let mut db = vec![S::zero(); batch * k * n];
                    for t in 0..*batch {
                        S::gemm(k, m, n, &ad[t * m * k..], true, &g[t * m * n..], false, S::zero(), &mut db[t * k * n..]);
                    }
                    self.accumulate(*b, db);
                }
            }
            Op::Transpose { x, batch, rows, cols } => {
                let d = transpose_data(g, *batch, *cols, *rows);
                self.accumulate(*x, d);
            }
            Op::Reshape { x } => self.accumulate(*x, g.to_vec()),
            Op::Concat { parts, axis } => {
                let shape = self.nodes[i].value.shape().to_vec();
                let outer = shape_numel(&shape[..*axis]);
                let tail = shape_numel(&shape[axis + 1..]);
                let row = shape[*axis] * tail;
                let mut offset = 0;
                for p in parts {
                    let chunk = self.value(*p).shape()[*axis] * tail;
                    if self.wants(*p) {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            d.extend_from_slice(&g[o * row + offset..o * row + offset + chunk]);
                        }
                        self.accumulate(*p, d);
                    }
                    offset += chunk;
                }
            }
            Op::Linear { x, map } => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let gt = Tensor::new(out_shape, g.to_vec())?;
                let in_shape = self.value(*x).shape().to_vec();
                let d = map.adjoint(&gt, &in_shape)?;
                if d.shape() != in_shape.as_slice() {
                    return Err(Error::shape(map.name(), "adjoint returned wrong shape"));
                }
                self.accumulate(*x, d.into_data());
            }
        }
        Ok(())
    }

    fn accumulate_opt(&mut self, v: Var, d: Option<Vec<S>>) {
        if let Some(d) = d {
            self.accumulate(v, d);
        }
    }

    fn binary_backward(&mut self, lhs: Var, rhs: Var, kind: Binary, g: &[S]) {
        // Partial of the output w.r.t. one operand, expanded to the output extent.
        let partial = |other: &[S], sign: S| -> Vec<S> {
            g.iter()
                .enumerate()
                .map(|(j, &g)| match kind {
                    Binary::Add => g,
                    Binary::Sub => g * sign,
                    Binary::Mul => g * other[if other.len() == 1 { 0 } else { j }],
                })
                .collect()
        };
        if self.wants(lhs) {
            let d = partial(self.value(rhs).data(), S::one());
            let len = self.value(lhs).numel();
            self.accumulate(lhs, fold_broadcast(d, len));
        }
        if self.wants(rhs) {
            let d = partial(self.value(lhs).data(), -S::one());
            let len = self.value(rhs).numel();
            self.accumulate(rhs, fold_broadcast(d, len));
        }
    }
}

/// Sums an output-sized gradient down to a broadcast operand of `len` elements.
fn fold_broadcast<S: Scalar>(d: Vec<S>, len: usize) -> Vec<S> {
    if d.len() == len {
        return d;
    }
    let mut s = S::zero();
    for v in d {
        s += v;
    }
    vec![s]
}

fn unary_name(kind: Unary) -> &'static str {
    match kind {
        Unary::Sigmoid => "sigmoid",
        Unary::Relu => "relu",
        Unary::LeakyRelu(_) => "leaky_relu",
        Unary::Tanh => "tanh",
        Unary::Abs => "abs",
        Unary::Neg => "neg",
    }
}

fn binary_name(kind: Binary) -> &'static str {
    match kind {
        Binary::Add => "add",
        Binary::Sub => "sub",
        Binary::Mul => "mul",
    }
}

fn reduce_name(kind: Reduce) -> &'static str {
    match kind {
        Reduce::Sum => "sum",
        Reduce::Mean => "mean",
        Reduce::AbsSum => "abs_sum",
    }
}

fn unary_forward<S: Scalar>(kind: Unary, x: S) -> S {
    match kind {
        Unary::Sigmoid => {
            // Split by sign so exp never overflows.
            if x >= S::zero() {
                S::one() / (S::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (S::one() + e)
            }
        }
        Unary::Relu => x.max(S::zero()),
        Unary::LeakyRelu(a) => {
            if x > S::zero() {
                x
            } else {
                x * S::lit(a)
            }
        }
        Unary::Tanh => x.tanh(),
        Unary::Abs => x.abs(),
        Unary::Neg => -x,
    }
}

fn unary_derivative<S: Scalar>(kind: Unary, x: S, y: S) -> S {
    match kind {
        Unary::Sigmoid => y * (S::one() - y),
        Unary::Relu => {
            if x > S::zero() {
                S::one()
            } else {
                S::zero()
            }
        }
        Unary::LeakyRelu(a) => {
            if x > S::zero() {
                S::one()
            } else {
                S::lit(a)
            }
        }
        Unary::Tanh => S::one() - y * y,
        Unary::Abs => sign(x),
        Unary::Neg => -S::one(),
    }
}

fn sign<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        S::one()
    } else if x < S::zero() {
        -S::one()
    } else {
        S::zero()
    }
}

fn normalize_axes(shape: &[usize], axes: &[usize]) -> Result<Vec<usize>> {
    if axes.is_empty() {
        return Ok((0..shape.len()).collect());
    }
    let mut out = axes.to_vec();
    out.sort_unstable();
    out.dedup();
    if let Some(&bad) = out.iter().find(|&&a| a >= shape.len()) {
        return Err(Error::Axis { axis: bad, rank: shape.len() });
    }
    Ok(out)
}

/// For each input flat index, the flat index of the output element it reduces into.
fn reduce_index_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> =
        shape.iter().enumerate().filter(|(i, _)| !axes.contains(i)).map(|(_, &d)| d).collect();
    let mut out_strides = vec![0usize; shape.len()];
    let mut stride = 1;
    for d in (0..shape.len()).rev() {
        if !axes.contains(&d) {
            out_strides[d] = stride;
            stride *= shape[d];
        }
    }
    let n = shape_numel(shape);
    let mut map = Vec::with_capacity(n);
    let mut coord = vec![0usize; shape.len()];
    for _ in 0..n {
        map.push(coord.iter().zip(&out_strides).map(|(c, s)| c * s).sum());
        for d in (0..shape.len()).rev() {
            coord[d] += 1;
            if coord[d] < shape[d] {
                break;
            }
            coord[d] = 0;
        }
    }
    (out_shape, map)
}

fn reduce_count(shape: &[usize], axes: &[usize]) -> usize {
    axes.iter().map(|&a| shape[a]).product()
}

pub(crate) fn reduce_forward<S: Scalar>(kind: Reduce, x: &Tensor<S>, axes: &[usize]) -> Tensor<S> {
    let shape = x.shape();
    let value = |v: S| if kind == Reduce::AbsSum { v.abs() } else { v };
    if axes.len() == shape.len() {
        let mut s = S::zero();
        for &v in x.data() {
            s += value(v);
        }
        if kind == Reduce::Mean {
            s = s / S::lit(x.numel().max(1) as f64);
        }
        return Tensor::scalar(s);
    }
    let (out_shape, map) = reduce_index_map(shape, axes);
    let mut out = vec![S::zero(); shape_numel(&out_shape)];
    for (&v, &o) in x.data().iter().zip(&map) {
        out[o] += value(v);
    }
    if kind == Reduce::Mean {
        let c = S::lit(reduce_count(shape, axes).max(1) as f64);
        for v in &mut out {
            *v = *v / c;
        }
    }
    Tensor::new(out_shape, out).expect("reduce output")
}

fn reduce_backward<S: Scalar>(kind: Reduce, x: &Tensor<S>, axes: &[usize], g: &[S]) -> Vec<S> {
    let shape = x.shape();
    let scale = if kind == Reduce::Mean {
        S::one() / S::lit(reduce_count(shape, axes).max(1) as f64)
    } else {
        S::one()
    };
    let factor = |i: usize| if kind == Reduce::AbsSum { sign(x.data()[i]) } else { scale };
    if axes.len() == shape.len() {
        return (0..x.numel()).map(|i| g[0] * factor(i)).collect();
    }
    let (_, map) = reduce_index_map(shape, axes);
    map.iter().enumerate().map(|(i, &o)| g[o] * factor(i)).collect()
}

fn transpose_data<S: Scalar>(src: &[S], batch: usize, rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); src.len()];
    for b in 0..batch {
        let s = &src[b * rows * cols..(b + 1) * rows * cols];
        let d = &mut out[b * rows * cols..(b + 1) * rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                d[c * rows + r] = s[r * cols + c];
            }
        }
    }
    out
}
