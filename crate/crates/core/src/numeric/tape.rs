//! Reverse-mode differentiation over a linear tape.
//!
//! Every primitive pushes one node holding its forward value and the handles of
//! its inputs. `backward` walks the nodes from the loss towards the leaves in
//! exact reverse order of recording, so gradient accumulation order is fixed
//! and repeated calls are bit-identical.

use std::collections::{BTreeMap, HashMap};

use super::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};
use crate::error::{Error, Result};

/// Divisors closer to zero than this are rejected by [`Tape::div`].
pub const SINGULARITY_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Tanh,
    Sigmoid,
    LogSigmoid,
    Exp,
    Log,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MinScalar(Var, f64),
    Sum(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    RowMean(Var),
    Softmax(Var),
    LogSoftmax(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    StackRows(Vec<Var>),
    SliceRows(Var, usize),
    Reshape(Var),
    GraphMix(Tensor, Var),
    GroupMean(Var, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar loss, keyed by parameter name.
///
/// Leaves registered without a name appear under `leaf:<index>`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientMap {
    grads: BTreeMap<String, Tensor>,
}

impl GradientMap {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&leaf_key(v))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn into_inner(self) -> BTreeMap<String, Tensor> {
        self.grads
    }
}

fn leaf_key(v: Var) -> String {
    format!("leaf:{}", v.0)
}

/// A single-threaded recording of tensor operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    names: HashMap<Var, String>,
    params: HashMap<String, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf; it is differentiated iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let g = t.requires_grad();
        self.push(t, Op::Leaf, g)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    /// Registers a named trainable leaf. Repeated registration of the same name
    /// returns the first handle so gradients from every use accumulate together.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let mut t = t.clone();
        t.set_requires_grad(true);
        let v = self.push(t, Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        self.names.insert(v, name.to_string());
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2();
        let (k2, n) = tb.dims2();
        if ta.shape().len() > 2 || tb.shape().len() > 2 || k != k2 {
            return Err(Error::dim("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), g))
    }

    fn broadcast_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb || self.value(b).is_scalar() {
            Ok(sa.to_vec())
        } else if self.value(a).is_scalar() {
            Ok(sb.to_vec())
        } else {
            Err(Error::dim(op, sa, sb))
        }
    }

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let shape = self.broadcast_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let n: usize = shape.iter().product();
        let ga = |i: usize| if ta.is_scalar() { ta.data()[0] } else { ta.data()[i] };
        let gb = |i: usize| if tb.is_scalar() { tb.data()[0] } else { tb.data()[i] };
        if kind == Binary::Div {
            let bad: Vec<usize> = (0..tb.numel())
                .filter(|&i| tb.data()[i].abs() < SINGULARITY_EPS)
                .collect();
            if !bad.is_empty() {
                return Err(Error::Singularity {
                    op: "div",
                    positions: bad,
                });
            }
        }
        let data: Vec<f64> = (0..n)
            .map(|i| match kind {
                Binary::Add => ga(i) + gb(i),
                Binary::Sub => ga(i) - gb(i),
                Binary::Mul => ga(i) * gb(i),
                Binary::Div => ga(i) / gb(i),
            })
            .collect();
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Binary(kind, a, b), g))
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

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Neg => |x| -x,
            Unary::Tanh => f64::tanh,
            Unary::Sigmoid => sigmoid,
            Unary::LogSigmoid => log_sigmoid,
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Relu => |x| if x > 0.0 { x } else { 0.0 },
        };
        let value = self.value(a).map(f);
        let g = self.ng(a);
        self.push(value, Op::Unary(kind, a), g)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Unary::Neg, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::LogSigmoid, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(Unary::Log, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let g = self.ng(a);
        self.push(value, Op::Scale(a, s), g)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        let g = self.ng(a);
        self.push(value, Op::AddScalar(a), g)
    }

    /// Elementwise `min(x, s)`; the derivative is 1 where `x < s`, else 0.
    pub fn min_with_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x.min(s));
        let g = self.ng(a);
        self.push(value, Op::MinScalar(a, s), g)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let g = self.ng(a);
        self.push(value, Op::Sum(a), g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    fn row_binary(&mut self, a: Var, row: Var, mul: bool) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        let tr = self.value(row);
        if tr.numel() != c {
            return Err(Error::dim(
                if mul { "mul_row" } else { "add_row" },
                self.value(a).shape(),
                tr.shape(),
            ));
        }
        let ta = self.value(a);
        let mut data = ta.data().to_vec();
        for i in 0..r {
            for (j, v) in data[i * c..(i + 1) * c].iter_mut().enumerate() {
                if mul {
                    *v *= tr.data()[j];
                } else {
                    *v += tr.data()[j];
                }
            }
        }
        let value = Tensor::new(vec![r, c], data)?;
        let g = self.ng(a) || self.ng(row);
        let op = if mul {
            Op::MulRow(a, row)
        } else {
            Op::AddRow(a, row)
        };
        Ok(self.push(value, op, g))
    }

    /// Adds a length-`c` vector to every row of an `r×c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_binary(a, row, false)
    }

    /// Multiplies every row of an `r×c` matrix elementwise by a length-`c` vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_binary(a, row, true)
    }

    /// Mean of each row: `r×c → r×1`.
    pub fn row_mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = t.dims2();
        let data = (0..r)
            .map(|i| t.data()[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64)
            .collect();
        let g = self.ng(a);
        self.push(Tensor::new(vec![r, 1], data).unwrap(), Op::RowMean(a), g)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = t.dims2();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c).take(r) {
            softmax_in_place(row);
        }
        let value = Tensor::new(t.shape().to_vec(), data).unwrap();
        let g = self.ng(a);
        self.push(value, Op::Softmax(a), g)
    }

    /// Row-wise log-softmax via log-sum-exp.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (_, c) = t.dims2();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c) {
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data).unwrap();
        let g = self.ng(a);
        self.push(value, Op::LogSoftmax(a), g)
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).dims2().0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2();
            if r != rows {
                return Err(Error::dim(
                    "concat_cols",
                    self.value(parts[0]).shape(),
                    self.value(p).shape(),
                ));
            }
            cols += c;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                let t = self.value(p);
                let c = t.dims2().1;
                data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
            }
        }
        let shape = if rows == 1 && self.value(parts[0]).shape().len() == 1 {
            vec![cols]
        } else {
            vec![rows, cols]
        };
        let g = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(shape, data)?, Op::ConcatCols(parts.to_vec()), g))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2();
        if len == 0 || start + len > c {
            return Err(Error::dim("slice_cols", t.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&t.data()[i * c + start..i * c + start + len]);
        }
        let shape = if t.shape().len() == 1 {
            vec![len]
        } else {
            vec![r, len]
        };
        let g = self.ng(a);
        Ok(self.push(Tensor::new(shape, data)?, Op::SliceCols(a, start), g))
    }

    /// Stacks equal-length vectors into the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let c = self.value(rows[0]).numel();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            let t = self.value(r);
            if t.numel() != c {
                return Err(Error::dim("stack_rows", self.value(rows[0]).shape(), t.shape()));
            }
            data.extend_from_slice(t.data());
        }
        let g = rows.iter().any(|&r| self.ng(r));
        Ok(self.push(
            Tensor::new(vec![rows.len(), c], data)?,
            Op::StackRows(rows.to_vec()),
            g,
        ))
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2();
        if len == 0 || start + len > r {
            return Err(Error::dim("slice_rows", t.shape(), &[start, len]));
        }
        let data = t.data()[start * c..(start + len) * c].to_vec();
        let g = self.ng(a);
        Ok(self.push(Tensor::new(vec![len, c], data)?, Op::SliceRows(a, start), g))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let g = self.ng(a);
        Ok(self.push(value, Op::Reshape(a), g))
    }

    /// Applies a fixed `n×n` node-mixing matrix to each consecutive block of
    /// `n` rows of `x` (frames stacked along rows): `Y_t = adj · X_t`.
    pub fn graph_mix(&mut self, adj: &Tensor, x: Var) -> Result<Var> {
        let (n, n2) = adj.dims2();
        let t = self.value(x);
        let (rows, c) = t.dims2();
        if n != n2 || rows % n != 0 {
            return Err(Error::dim("graph_mix", adj.shape(), t.shape()));
        }
        let mut out = vec![0.0; rows * c];
        for f in 0..rows / n {
            let base = f * n * c;
            matmul_into(
                adj.data(),
                &t.data()[base..base + n * c],
                &mut out[base..base + n * c],
                n,
                n,
                c,
            );
        }
        let g = self.ng(x);
        Ok(self.push(
            Tensor::new(vec![rows, c], out)?,
            Op::GraphMix(adj.clone(), x),
            g,
        ))
    }

    /// Mean over each consecutive block of `group` rows: `(g·t)×c → t×c`.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, c) = t.dims2();
        if group == 0 || rows % group != 0 {
            return Err(Error::dim("group_mean", t.shape(), &[group]));
        }
        let blocks = rows / group;
        let mut out = vec![0.0; blocks * c];
        for b in 0..blocks {
            for r in 0..group {
                let src = &t.data()[(b * group + r) * c..(b * group + r + 1) * c];
                for (o, v) in out[b * c..(b + 1) * c].iter_mut().zip(src) {
                    *o += v;
                }
            }
            for o in &mut out[b * c..(b + 1) * c] {
                *o /= group as f64;
            }
        }
        let g = self.ng(x);
        Ok(self.push(Tensor::new(vec![blocks, c], out)?, Op::GroupMean(x, group), g))
    }

    /// Element `i` of a tensor as a scalar.
    pub fn select(&mut self, a: Var, i: usize) -> Result<Var> {
        let flat = self.reshape(a, &[self.value(a).numel()])?;
        self.slice_cols(flat, i, 1)
    }

    /// Gradients of the scalar `loss` with respect to every differentiable leaf.
    pub fn backward(&self, loss: Var) -> Result<GradientMap> {
        if self.nodes.is_empty() {
            return Err(Error::Backward("tape is empty".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Backward("loss handle is not on this tape".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            if let Op::Leaf = node.op {
                grads[idx] = Some(gout);
                continue;
            }
            self.propagate(node, &gout, &mut grads);
        }

        let mut out = BTreeMap::new();
        for (idx, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[idx];
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let data = g.unwrap_or_else(|| vec![0.0; node.value.numel()]);
            let key = self
                .names
                .get(&Var(idx))
                .cloned()
                .unwrap_or_else(|| leaf_key(Var(idx)));
            out.insert(key, Tensor::new(node.value.shape().to_vec(), data)?);
        }
        Ok(GradientMap { grads: out })
    }

    fn propagate(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2();
                let n = val(*b).dims2().1;
                let (ad, bd) = (val(*a).data(), val(*b).data());
                acc(*a, &|g| matmul_nt_into(gout, bd, g, m, n, k));
                acc(*b, &|g| matmul_tn_into(ad, gout, g, m, k, n));
            }
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let av = |i: usize| if ta.is_scalar() { ta.data()[0] } else { ta.data()[i] };
                let bv = |i: usize| if tb.is_scalar() { tb.data()[0] } else { tb.data()[i] };
                let da = |i: usize| match kind {
                    Binary::Add | Binary::Sub => 1.0,
                    Binary::Mul => bv(i),
                    Binary::Div => 1.0 / bv(i),
                };
                let db = |i: usize| match kind {
                    Binary::Add => 1.0,
                    Binary::Sub => -1.0,
                    Binary::Mul => av(i),
                    Binary::Div => -av(i) / (bv(i) * bv(i)),
                };
                let scatter = |g: &mut [f64], d: &dyn Fn(usize) -> f64| {
                    if g.len() == 1 && gout.len() > 1 {
                        g[0] += gout.iter().enumerate().map(|(i, go)| go * d(i)).sum::<f64>();
                    } else {
                        for (i, (gi, go)) in g.iter_mut().zip(gout).enumerate() {
                            *gi += go * d(i);
                        }
                    }
                };
                acc(*a, &|g| scatter(g, &da));
                acc(*b, &|g| scatter(g, &db));
            }
            Op::Unary(kind, a) => {
                let x = val(*a).data();
                acc(*a, &|g| {
                    for i in 0..g.len() {
                        let d = match kind {
                            Unary::Neg => -1.0,
                            Unary::Tanh => 1.0 - y[i] * y[i],
                            Unary::Sigmoid => y[i] * (1.0 - y[i]),
                            Unary::LogSigmoid => sigmoid(-x[i]),
                            Unary::Exp => y[i],
                            Unary::Log => 1.0 / x[i],
                            Unary::Relu => {
                                if x[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        g[i] += gout[i] * d;
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &|g| {
                for (gi, go) in g.iter_mut().zip(gout) {
                    *gi += go * s;
                }
            }),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &|g| {
                for (gi, go) in g.iter_mut().zip(gout) {
                    *gi += go;
                }
            }),
            Op::MinScalar(a, s) => {
                let x = val(*a).data();
                acc(*a, &|g| {
                    for i in 0..g.len() {
                        if x[i] < *s {
                            g[i] += gout[i];
                        }
                    }
                })
            }
            Op::Sum(a) => acc(*a, &|g| {
                for gi in g.iter_mut() {
                    *gi += gout[0];
                }
            }),
            Op::AddRow(a, row) | Op::MulRow(a, row) => {
                let is_mul = matches!(node.op, Op::MulRow(..));
                let (r, c) = val(*a).dims2();
                let (ad, rd) = (val(*a).data(), val(*row).data());
                acc(*a, &|g| {
                    for i in 0..r * c {
                        g[i] += if is_mul { gout[i] * rd[i % c] } else { gout[i] };
                    }
                });
                acc(*row, &|g| {
                    for i in 0..r {
                        for j in 0..c {
                            let go = gout[i * c + j];
                            g[j] += if is_mul { go * ad[i * c + j] } else { go };
                        }
                    }
                });
            }
            Op::RowMean(a) => {
                let (r, c) = val(*a).dims2();
                acc(*a, &|g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += gout[i] / c as f64;
                        }
                    }
                })
            }
            Op::Softmax(a) => {
                let c = node.value.dims2().1;
                acc(*a, &|g| {
                    for (row, (yr, gr)) in g.chunks_mut(c).zip(y.chunks(c).zip(gout.chunks(c))) {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            row[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                })
            }
            Op::LogSoftmax(a) => {
                let c = node.value.dims2().1;
                acc(*a, &|g| {
                    for (row, (yr, gr)) in g.chunks_mut(c).zip(y.chunks(c).zip(gout.chunks(c))) {
                        let total: f64 = gr.iter().sum();
                        for j in 0..c {
                            row[j] += gr[j] - yr[j].exp() * total;
                        }
                    }
                })
            }
            Op::ConcatCols(parts) => {
                let (rows, cols) = node.value.dims2();
                let mut offset = 0;
                for &p in parts {
                    let c = val(p).dims2().1;
                    acc(p, &|g| {
                        for i in 0..rows {
                            for j in 0..c {
                                g[i * c + j] += gout[i * cols + offset + j];
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = val(*a).dims2();
                let len = node.value.dims2().1;
                acc(*a, &|g| {
                    for i in 0..r {
                        for j in 0..len {
                            g[i * c + start + j] += gout[i * len + j];
                        }
                    }
                })
            }
            Op::StackRows(rows) => {
                let c = node.value.dims2().1;
                for (i, &r) in rows.iter().enumerate() {
                    acc(r, &|g| {
                        for (gi, go) in g.iter_mut().zip(&gout[i * c..(i + 1) * c]) {
                            *gi += go;
                        }
                    });
                }
            }
            Op::SliceRows(a, start) => {
                let c = node.value.dims2().1;
                acc(*a, &|g| {
                    for (gi, go) in g[start * c..start * c + gout.len()].iter_mut().zip(gout) {
                        *gi += go;
                    }
                })
            }
            Op::GraphMix(adj, x) => {
                let n = adj.dims2().0;
                let (rows, c) = val(*x).dims2();
                acc(*x, &|g| {
                    for f in 0..rows / n {
                        let base = f * n * c;
                        matmul_tn_into(
                            adj.data(),
                            &gout[base..base + n * c],
                            &mut g[base..base + n * c],
                            n,
                            n,
                            c,
                        );
                    }
                })
            }
            Op::GroupMean(x, group) => {
                let (rows, c) = val(*x).dims2();
                acc(*x, &|g| {
                    for r in 0..rows {
                        let b = r / group;
                        for j in 0..c {
                            g[r * c + j] += gout[b * c + j] / *group as f64;
                        }
                    }
                })
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x) = -softplus(-x)`, stable for large |x|.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in xs.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    for v in xs.iter_mut() {
        *v /= total;
    }
}
