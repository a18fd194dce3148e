//! Define-by-run reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every forward pass builds a fresh [`Tape`]. Operations append nodes whose
//! inputs always precede them, so walking the node list backwards is a valid
//! reverse topological order. A tape created with [`Tape::inference`] keeps
//! values only; calling [`Tape::backward`] on it is a contract error.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{gemm_nt, gemm_tn, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Exp,
    Log,
    Tanh,
    Relu,
    Softplus,
    Neg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

/// Pooling over the set axis of a `[batch, set, features]` tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    Mean,
    Sum,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(BinaryOp, Var, Var),
    AddRow(Var, Var),
    Unary(UnaryOp, Var),
    Scale(Var, f64),
    Shift(Var),
    Reduce {
        op: ReduceOp,
        src: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    SumAll(Var),
    Pool {
        kind: Pooling,
        src: Var,
        argmax: Vec<usize>,
    },
    Concat(Vec<Var>),
    Columns(Var, Vec<usize>),
    Reshape(Var),
    LogSumExp(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
}

/// Record of primitive operations for one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    recording: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// A recording tape.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that evaluates values without recording adjoint information.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Var {
        let op = if self.recording { op } else { Op::Leaf };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Adds an input tensor (parameter, data or constant).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let f = |x: T, y: T| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
        };
        let out = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(va.shape().to_vec(), data)?
        } else if vb.numel() == 1 {
            let y = vb.data()[0];
            va.map(|x| f(x, y))
        } else if va.numel() == 1 {
            let x = va.data()[0];
            vb.map(|y| f(x, y))
        } else {
            return Err(Error::shape("elementwise", va.shape(), vb.shape()));
        };
        Ok(self.push(out, Op::Binary(op, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    /// `x[r×c] + bias[c]`, broadcasting the bias over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vx.rank() != 2 || vb.numel() != vx.cols() {
            return Err(Error::shape("add_row", vx.shape(), vb.shape()));
        }
        let c = vx.cols();
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(c.max(1)) {
            for (o, &b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let out = match op {
            UnaryOp::Exp => vx.map(T::exp),
            UnaryOp::Log => {
                if let Some(bad) = vx.data().iter().find(|v| !(**v > T::zero())) {
                    return Err(Error::Domain(format!("log of non-positive value {bad}")));
                }
                vx.map(T::ln)
            }
            UnaryOp::Tanh => vx.map(T::tanh),
            UnaryOp::Relu => vx.map(|v| if v > T::zero() { v } else { T::zero() }),
            UnaryOp::Softplus => vx.map(softplus),
            UnaryOp::Neg => vx.map(|v| -v),
        };
        Ok(self.push(out, Op::Unary(op, x)))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Softplus, x)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Neg, x)
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let k = T::of(c);
        let out = self.value(x).map(|v| v * k);
        self.push(out, Op::Scale(x, c))
    }

    /// Adds a constant.
    pub fn shift(&mut self, x: Var, c: f64) -> Var {
        let k = T::of(c);
        let out = self.value(x).map(|v| v + k);
        self.push(out, Op::Shift(x))
    }

    /// Reduction along `axis`, removing that axis. Sums accumulate in `f64`.
    pub fn reduce(&mut self, op: ReduceOp, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        let shape = vx.shape();
        if axis >= shape.len() {
            return Err(Error::Domain(format!(
                "reduce axis {axis} out of range for rank {}",
                shape.len()
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        if op == ReduceOp::Mean && len == 0 {
            return Err(Error::Domain("mean over an empty axis".into()));
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let data = vx.data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = 0.0f64;
                for l in 0..len {
                    acc += data[(o * len + l) * inner + i].to_f64_lossless();
                }
                if op == ReduceOp::Mean {
                    acc /= len as f64;
                }
                out.push(T::of(acc));
            }
        }
        let out = Tensor::new(out_shape, out)?;
        Ok(self.push(
            out,
            Op::Reduce {
                op,
                src: x,
                outer,
                len,
                inner,
            },
        ))
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceOp::Sum, x, axis)
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceOp::Mean, x, axis)
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let acc: f64 = self.value(x).data().iter().map(|v| v.to_f64_lossless()).sum();
        self.push(Tensor::scalar(T::of(acc)), Op::SumAll(x))
    }

    /// Mean of every element, as a rank-0 tensor.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::Domain("mean of an empty tensor".into()));
        }
        let s = self.sum_all(x);
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Pools `[batch, set, features]` over the set axis into `[batch, features]`.
    ///
    /// Sums are taken over values in sorted order, so the result depends only
    /// on the multiset of set elements and is bit-identical under any
    /// permutation of the set axis.
    pub fn pool(&mut self, kind: Pooling, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 3 {
            return Err(Error::shape("pool", vx.shape(), &[0, 0, 0]));
        }
        let (b, n, h) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        if n == 0 {
            return Err(Error::Domain("pooling over an empty set".into()));
        }
        let data = vx.data();
        let mut out = Vec::with_capacity(b * h);
        let mut argmax = Vec::new();
        let mut column = Vec::with_capacity(n);
        for bi in 0..b {
            for hi in 0..h {
                column.clear();
                column.extend((0..n).map(|ni| data[(bi * n + ni) * h + hi]));
                match kind {
                    Pooling::Max => {
                        let mut best = 0;
                        for (ni, &v) in column.iter().enumerate() {
                            if v > column[best] {
                                best = ni;
                            }
                        }
                        argmax.push(best);
                        out.push(column[best]);
                    }
                    Pooling::Sum | Pooling::Mean => {
                        column.sort_unstable_by(|p, q| p.to_f64_lossless().total_cmp(&q.to_f64_lossless()));
                        let mut acc: f64 = column.iter().map(|v| v.to_f64_lossless()).sum();
                        if kind == Pooling::Mean {
                            acc /= n as f64;
                        }
                        out.push(T::of(acc));
                    }
                }
            }
        }
        let out = Tensor::new(vec![b, h], out)?;
        Ok(self.push(out, Op::Pool { kind, src: x, argmax }))
    }

    /// Column-wise concatenation of rank-2 tensors with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::hcat(&values)?;
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    /// Gathers columns of a rank-2 tensor (permutation or slice).
    pub fn columns(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 2 {
            return Err(Error::shape("columns", vx.shape(), &[0, 0]));
        }
        let (r, c) = (vx.rows(), vx.cols());
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(Error::shape("columns", vx.shape(), &[bad]));
        }
        let mut data = Vec::with_capacity(r * idx.len());
        for i in 0..r {
            let row = vx.row(i);
            data.extend(idx.iter().map(|&j| row[j]));
        }
        let out = Tensor::new(vec![r, idx.len()], data)?;
        Ok(self.push(out, Op::Columns(x, idx.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Row-wise `log Σ exp`, stabilized by subtracting the row maximum.
    pub fn logsumexp_rows(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 2 || vx.cols() == 0 {
            return Err(Error::shape("logsumexp_rows", vx.shape(), &[0, 1]));
        }
        let out: Vec<T> = (0..vx.rows()).map(|i| T::of(logsumexp(vx.row(i)))).collect();
        let out = Tensor::new(vec![vx.rows()], out)?;
        Ok(self.push(out, Op::LogSumExp(x)))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients<T>> {
        if !self.recording {
            return Err(Error::Contract(
                "backward on an inference tape (nothing recorded)".into(),
            ));
        }
        let root = &self.nodes[out.0].value;
        if root.numel() != 1 {
            return Err(Error::Contract(format!(
                "gradient requires a scalar output, got shape {:?}",
                root.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::full(root.shape(), T::one()));
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                let mut ga = vec![T::zero(); m * k];
                gemm_nt(g.data(), vb.data(), &mut ga, m, n, k);
                let mut gb = vec![T::zero(); k * n];
                gemm_tn(va.data(), g.data(), &mut gb, k, m, n);
                accumulate(grads, *a, Tensor::new(vec![m, k], ga)?);
                accumulate(grads, *b, Tensor::new(vec![k, n], gb)?);
            }
            Op::Binary(op, a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (ga, gb) = match op {
                    BinaryOp::Add => (g.clone(), g.clone()),
                    BinaryOp::Sub => (g.clone(), g.map(|v| -v)),
                    BinaryOp::Mul => (mul_broadcast(g, vb), mul_broadcast(g, va)),
                };
                accumulate(grads, *a, unbroadcast(ga, va.shape()));
                accumulate(grads, *b, unbroadcast(gb, vb.shape()));
            }
            Op::AddRow(x, bias) => {
                let c = g.cols();
                let mut gb = vec![0.0f64; c];
                for i in 0..g.rows() {
                    for (acc, v) in gb.iter_mut().zip(g.row(i)) {
                        *acc += v.to_f64_lossless();
                    }
                }
                let shape = self.value(*bias).shape().to_vec();
                accumulate(grads, *x, g.clone());
                accumulate(grads, *bias, Tensor::from_f64(&shape, &gb)?);
            }
            Op::Unary(op, x) => {
                let vx = self.value(*x);
                let y = &node.value;
                let data: Vec<T> = match op {
                    UnaryOp::Exp => zip_map(g, y, |g, y| g * y),
                    UnaryOp::Log => zip_map(g, vx, |g, x| g / x),
                    UnaryOp::Tanh => zip_map(g, y, |g, y| g * (T::one() - y * y)),
                    UnaryOp::Relu => zip_map(g, vx, |g, x| if x > T::zero() { g } else { T::zero() }),
                    UnaryOp::Softplus => zip_map(g, vx, |g, x| g * sigmoid(x)),
                    UnaryOp::Neg => g.data().iter().map(|&v| -v).collect(),
                };
                accumulate(grads, *x, Tensor::new(vx.shape().to_vec(), data)?);
            }
            Op::Scale(x, c) => {
                let k = T::of(*c);
                accumulate(grads, *x, g.map(|v| v * k));
            }
            Op::Shift(x) => accumulate(grads, *x, g.clone()),
            Op::Reduce {
                op,
                src,
                outer,
                len,
                inner,
            } => {
                let scale = match op {
                    ReduceOp::Sum => T::one(),
                    ReduceOp::Mean => T::one() / T::of(*len as f64),
                };
                let mut out = vec![T::zero(); outer * len * inner];
                for o in 0..*outer {
                    for l in 0..*len {
                        for i in 0..*inner {
                            out[(o * len + l) * inner + i] = g.data()[o * inner + i] * scale;
                        }
                    }
                }
                let shape = self.value(*src).shape().to_vec();
                accumulate(grads, *src, Tensor::new(shape, out)?);
            }
            Op::SumAll(x) => {
                let gv = g.data()[0];
                let shape = self.value(*x).shape();
                accumulate(grads, *x, Tensor::full(shape, gv));
            }
            Op::Pool { kind, src, argmax } => {
                let shape = self.value(*src).shape().to_vec();
                let (b, n, h) = (shape[0], shape[1], shape[2]);
                let mut out = vec![T::zero(); b * n * h];
                for bi in 0..b {
                    for hi in 0..h {
                        let gv = g.data()[bi * h + hi];
                        match kind {
                            Pooling::Max => {
                                let ni = argmax[bi * h + hi];
                                out[(bi * n + ni) * h + hi] = gv;
                            }
                            Pooling::Sum | Pooling::Mean => {
                                let gv = if *kind == Pooling::Mean {
                                    gv / T::of(n as f64)
                                } else {
                                    gv
                                };
                                for ni in 0..n {
                                    out[(bi * n + ni) * h + hi] = gv;
                                }
                            }
                        }
                    }
                }
                accumulate(grads, *src, Tensor::new(shape, out)?);
            }
            Op::Concat(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut data = Vec::with_capacity(rows * w);
                    for i in 0..rows {
                        data.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                    }
                    accumulate(grads, p, Tensor::new(vec![rows, w], data)?);
                    offset += w;
                }
            }
            Op::Columns(x, idx) => {
                let vx = self.value(*x);
                let (r, c) = (vx.rows(), vx.cols());
                let mut out = vec![T::zero(); r * c];
                for i in 0..r {
                    for (k, &j) in idx.iter().enumerate() {
                        out[i * c + j] += g.data()[i * idx.len() + k];
                    }
                }
                accumulate(grads, *x, Tensor::new(vec![r, c], out)?);
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                accumulate(grads, *x, g.clone().reshape(&shape)?);
            }
            Op::LogSumExp(x) => {
                let vx = self.value(*x);
                let c = vx.cols();
                let mut out = Vec::with_capacity(vx.numel());
                for i in 0..vx.rows() {
                    let lse = node.value.data()[i];
                    let gi = g.data()[i];
                    out.extend(vx.row(i).iter().map(|&v| gi * (v - lse).exp()));
                }
                accumulate(grads, *x, Tensor::new(vec![vx.rows(), c], out)?);
            }
        }
        Ok(())
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`; zeros if `v` did not influence the output.
    pub fn wrt(&self, v: Var, tape: &Tape<T>) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.shape(v)),
        }
    }

    /// Moves gradients of the listed variables out.
    pub fn take_all(mut self, vars: &[Var], tape: &Tape<T>) -> Vec<Tensor<T>> {
        vars.iter()
            .map(|&v| self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
            .collect()
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += *x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn zip_map<T: Scalar>(g: &Tensor<T>, v: &Tensor<T>, f: impl Fn(T, T) -> T) -> Vec<T> {
    g.data().iter().zip(v.data()).map(|(&a, &b)| f(a, b)).collect()
}

fn mul_broadcast<T: Scalar>(g: &Tensor<T>, other: &Tensor<T>) -> Tensor<T> {
    if other.numel() == g.numel() {
        Tensor::new(g.shape().to_vec(), zip_map(g, other, |a, b| a * b)).expect("same length")
    } else {
        let k = other.data()[0];
        g.map(|a| a * k)
    }
}

/// Sums a gradient back down to a broadcast operand's shape.
fn unbroadcast<T: Scalar>(g: Tensor<T>, shape: &[usize]) -> Tensor<T> {
    let numel: usize = shape.iter().product();
    if g.numel() == numel {
        return g.reshape(shape).expect("same numel");
    }
    let total: f64 = g.data().iter().map(|v| v.to_f64_lossless()).sum();
    Tensor::full(shape, T::of(total))
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable `ln(1 + eˣ)`.
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// `log Σ exp(xᵢ)` in `f64` with max subtraction.
pub fn logsumexp<T: Scalar>(xs: &[T]) -> f64 {
    let m = xs.iter().map(|v| v.to_f64_lossless()).fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|v| (v.to_f64_lossless() - m).exp()).sum::<f64>().ln()
}

/// Evaluates `f` on a fresh tape and returns its value and the gradients with
/// respect to every input.
pub fn value_and_grad<T, F>(inputs: &[Tensor<T>], f: F) -> Result<(T, Vec<Tensor<T>>)>
where
    T: Scalar,
    F: FnOnce(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out).item().map_err(|_| {
        Error::Contract(format!(
            "gradient requires a scalar output, got shape {:?}",
            tape.shape(out)
        ))
    })?;
    let grads = tape.backward(out)?.take_all(&vars, &tape);
    Ok((value, grads))
}

/// Reverse-mode gradients of a scalar program with respect to `inputs`.
pub fn grad<T, F>(inputs: &[Tensor<T>], f: F) -> Result<Vec<Tensor<T>>>
where
    T: Scalar,
    F: FnOnce(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    value_and_grad(inputs, f).map(|(_, g)| g)
}

/// Compares reverse-mode gradients of `f` at `x` against five-point central
/// differences with step `h` (truncation error `O(h⁴)`), returning
/// `maxᵢ |ad − fd| / (|fd| + 1e−8)`.
///
/// Points where `f` is not differentiable (e.g. a relu input at exactly 0)
/// can produce large values; callers should sample away from kinks.
pub fn finite_difference_check<T, F>(f: F, x: &Tensor<T>, h: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let ad = grad(std::slice::from_ref(x), |tape, vars| f(tape, vars[0]))?.remove(0);
    let eval = |point: Tensor<T>| -> Result<f64> {
        let mut tape = Tape::inference();
        let v = tape.leaf(point);
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item()?.to_f64_lossless())
    };
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let at = |offset: f64| {
            let mut p = x.clone();
            p.data_mut()[i] += T::of(offset);
            eval(p)
        };
        let fd = (8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h);
        let err = (ad.data()[i].to_f64_lossless() - fd).abs() / (fd.abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn tanh_relu_softplus_values_and_adjoints() {
        let g = grad(&[t(&[1], &[0.0])], |tp, v| {
            let y = tp.tanh(v[0])?;
            Ok(tp.sum_all(y))
        })
        .unwrap();
        assert_eq!(g[0].data(), &[1.0]);

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1], &[0.0]));
        let y = tape.softplus(x).unwrap();
        assert!((tape.value(y).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);

        let g = grad(&[t(&[1], &[-3.0])], |tp, v| {
            let y = tp.relu(v[0])?;
            Ok(tp.sum_all(y))
        })
        .unwrap();
        assert_eq!(g[0].data(), &[0.0]);
        // adjoint at exactly zero is zero
        let g = grad(&[t(&[1], &[0.0])], |tp, v| {
            let y = tp.relu(v[0])?;
            Ok(tp.sum_all(y))
        })
        .unwrap();
        assert_eq!(g[0].data(), &[0.0]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_f64(&[2], &[1.0, 0.0]).unwrap());
        assert!(matches!(tape.log(x), Err(Error::Domain(_))));
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::zeros(&[2]));
        let b = tape.leaf(Tensor::zeros(&[3]));
        assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn reductions() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[1., 2., 3.]));
        let s = tape.sum(x, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[6.0]);
        let m = tape.mean(x, 0).unwrap();
        assert_eq!(tape.value(m).data(), &[2.0]);
        let g = tape.backward(m).unwrap().wrt(x, &tape);
        for v in g.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = tape.leaf(t(&[2, 2], &[1., 2., 3., 4.]));
        let s0 = tape.sum(y, 0).unwrap();
        assert_eq!(tape.value(s0).data(), &[4.0, 6.0]);
        let empty = tape.leaf(Tensor::zeros(&[0]));
        assert!(matches!(tape.mean(empty, 0), Err(Error::Domain(_))));
        assert!(tape.sum(y, 2).is_err());
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let g = grad(&[t(&[3], &[1., 2., 3.])], |tp, v| {
            let sq = tp.mul(v[0], v[0])?;
            Ok(tp.sum_all(sq))
        })
        .unwrap();
        assert_eq!(g[0].data(), &[2., 4., 6.]);
    }

    #[test]
    fn grad_of_constant_is_zero() {
        let g = grad(&[t(&[2], &[1., 2.])], |tp, _| Ok(tp.leaf(Tensor::scalar(5.0)))).unwrap();
        assert_eq!(g[0].data(), &[0., 0.]);
    }

    #[test]
    fn non_scalar_output_is_contract_error() {
        let r = grad(&[t(&[2], &[1., 2.])], |_, v| Ok(v[0]));
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn inference_tape_cannot_backward() {
        let mut tape = Tape::<f32>::inference();
        let x = tape.leaf(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn fd_check_square() {
        let err = finite_difference_check(
            |tp, x| {
                let sq = tp.mul(x, x)?;
                Ok(tp.sum_all(sq))
            },
            &t(&[1], &[3.0]),
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn relu_kink_breaks_fd_check() {
        // documented exclusion: at the kink the central difference sees slope 1/2
        let err = finite_difference_check(
            |tp, x| {
                let r = tp.relu(x)?;
                Ok(tp.sum_all(r))
            },
            &t(&[1], &[0.0]),
            1e-3,
        )
        .unwrap();
        assert!(err > 0.5);
    }

    #[test]
    fn pool_is_permutation_invariant() {
        let mut tape = Tape::<f32>::new();
        let vals: Vec<f64> = (0..12).map(|i| ((i * 7919) % 13) as f64 * 0.37 - 2.0).collect();
        let x = tape.leaf(Tensor::from_f64(&[1, 4, 3], &vals).unwrap());
        let mut perm = Vec::new();
        for &r in &[2usize, 0, 3, 1] {
            perm.extend_from_slice(&vals[r * 3..r * 3 + 3]);
        }
        let y = tape.leaf(Tensor::from_f64(&[1, 4, 3], &perm).unwrap());
        for kind in [Pooling::Mean, Pooling::Sum, Pooling::Max] {
            let a = tape.pool(kind, x).unwrap();
            let b = tape.pool(kind, y).unwrap();
            assert_eq!(tape.value(a), tape.value(b));
        }
    }
}
