//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every op appends a node whose parents have smaller indices, so the node
//! list is already a topological order and the reverse sweep is a single
//! backwards pass over it.

use super::kernels::{
    broadcast_shape, broadcast_strides, contiguous_strides, count_macs, for_each_pair, gemm,
    gemm_nt, gemm_tn, numel, split_axis,
};
use crate::error::{Error, Result};

/// Handle to a tensor node inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Numeric precision for a whole run. Values are always stored as `f64`;
/// in `Standard` mode every op output is rounded to `f32` resolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    High,
    Standard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Neg,
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Softplus,
    Abs,
    Square,
    Sqrt,
}

#[derive(Clone, Debug)]
struct MatMulPlan {
    m: usize,
    k: usize,
    n: usize,
    batch: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
    shared_rhs: bool,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary { kind: BinaryKind, a: usize, b: usize },
    Unary { kind: UnaryKind, a: usize },
    Scale { a: usize, factor: f64 },
    Offset { a: usize },
    MatMul { a: usize, b: usize, plan: MatMulPlan },
    Softmax { a: usize, axis: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Sum { a: usize },
    SumAxis { a: usize, axis: usize },
    Reshape { a: usize },
    Permute { a: usize, perm: Vec<usize> },
    Concat { parts: Vec<usize>, axis: usize },
    Narrow { a: usize, axis: usize, start: usize },
    Gather { table: usize, index: Vec<Option<usize>> },
    Unfold { x: usize, kernel: usize, stride: usize, pad: usize },
    LightConv { x: usize, w: usize, causal: bool },
}

#[derive(Clone, Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
    /// Values cut off by [`Graph::detach`], in call order.
    detached: Vec<Vec<f64>>,
    /// When set, `detach` returns these values instead of its input's.
    replay: Option<std::vec::IntoIter<Vec<f64>>>,
}

fn unary_forward(kind: UnaryKind, x: f64) -> f64 {
    match kind {
        UnaryKind::Neg => -x,
        UnaryKind::Relu => x.max(0.0),
        UnaryKind::Sigmoid => sigmoid(x),
        UnaryKind::Tanh => x.tanh(),
        UnaryKind::Exp => x.exp(),
        UnaryKind::Log => x.ln(),
        UnaryKind::Softplus => softplus(x),
        UnaryKind::Abs => x.abs(),
        UnaryKind::Square => x * x,
        UnaryKind::Sqrt => x.sqrt(),
    }
}

fn unary_grad(kind: UnaryKind, x: f64, y: f64) -> f64 {
    match kind {
        UnaryKind::Neg => -1.0,
        UnaryKind::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        UnaryKind::Sigmoid => y * (1.0 - y),
        UnaryKind::Tanh => 1.0 - y * y,
        UnaryKind::Exp => y,
        UnaryKind::Log => 1.0 / x,
        UnaryKind::Softplus => sigmoid(x),
        UnaryKind::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        UnaryKind::Square => 2.0 * x,
        UnaryKind::Sqrt => 0.5 / y,
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

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Graph {
            nodes: Vec::new(),
            precision,
            detached: Vec::new(),
            replay: None,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, mut value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        if self.precision == Precision::Standard {
            for v in value.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn check_values(shape: &[usize], values: &[f64]) -> Result<()> {
        if numel(shape) != values.len() {
            return Err(Error::invalid(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                numel(shape),
                values.len()
            )));
        }
        Ok(())
    }

    /// A node that never receives gradient.
    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        Self::check_values(shape, &values)?;
        Ok(self.push(shape.to_vec(), values, Op::Leaf, false))
    }

    /// A differentiable leaf (parameter or checked input).
    pub fn leaf(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        Self::check_values(shape, &values)?;
        Ok(self.push(shape.to_vec(), values, Op::Leaf, true))
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(Vec::new(), vec![value], Op::Leaf, false)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        self.push(shape.to_vec(), vec![0.0; numel(shape)], Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after one or more [`Graph::backward`] calls.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let node = &self.nodes[v.0];
        let shape = node.shape.clone();
        let value = match self.replay.as_mut().and_then(|r| r.next()) {
            Some(fixed) if fixed.len() == node.value.len() => fixed,
            _ => node.value.clone(),
        };
        self.detached.push(value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    /// Every value produced by `detach` so far, in call order.
    pub fn detached_values(&self) -> &[Vec<f64>] {
        &self.detached
    }

    /// Makes subsequent `detach` calls return `values` in order, so a
    /// perturbed re-run treats stop-gradient inputs as the constants they
    /// were in a reference run.
    pub fn replay_detached(&mut self, values: Vec<Vec<f64>>) {
        self.replay = Some(values.into_iter());
    }

    fn rg(&self, a: usize) -> bool {
        self.nodes[a].requires_grad
    }

    // ---- elementwise -------------------------------------------------

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let out = broadcast_shape(sa, sb).ok_or_else(|| {
            Error::shape(
                match kind {
                    BinaryKind::Add => "add",
                    BinaryKind::Sub => "sub",
                    BinaryKind::Mul => "mul",
                    BinaryKind::Div => "div",
                },
                sa,
                sb,
            )
        })?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let value: Vec<f64> = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut v = vec![0.0; numel(&out)];
            let (ta, tb) = (broadcast_strides(sa, &out), broadcast_strides(sb, &out));
            for_each_pair(&out, &ta, &tb, |o, i, j| v[o] = f(va[i], vb[j]));
            v
        };
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(out, value, Op::Binary { kind, a: a.0, b: b.0 }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        let node = &self.nodes[a.0];
        let value = node.value.iter().map(|&x| unary_forward(kind, x)).collect();
        let shape = node.shape.clone();
        let rg = node.requires_grad;
        self.push(shape, value, Op::Unary { kind, a: a.0 }, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Neg, a)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Relu, a)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Tanh, a)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a)
    }
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Log, a)
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Softplus, a)
    }
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Abs, a)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Square, a)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sqrt, a)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let node = &self.nodes[a.0];
        let value = node.value.iter().map(|&x| x * factor).collect();
        let shape = node.shape.clone();
        let rg = node.requires_grad;
        self.push(shape, value, Op::Scale { a: a.0, factor }, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let node = &self.nodes[a.0];
        let value = node.value.iter().map(|&x| x + c).collect();
        let shape = node.shape.clone();
        let rg = node.requires_grad;
        self.push(shape, value, Op::Offset { a: a.0 }, rg)
    }

    // ---- contraction -------------------------------------------------

    /// Batched matrix product with broadcast leading dimensions. Rank-1
    /// operands are promoted to a row (lhs) or column (rhs) and squeezed back.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ra = self.nodes[a.0].shape.len();
        let rb = self.nodes[b.0].shape.len();
        if ra == 0 || rb == 0 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        if rb == 1 {
            let k = self.nodes[b.0].shape[0];
            let col = self.reshape(b, &[k, 1])?;
            let out = self.matmul(a, col)?;
            let mut s = self.shape(out).to_vec();
            s.pop();
            return self.reshape(out, &s);
        }
        if ra == 1 {
            let k = self.nodes[a.0].shape[0];
            let row = self.reshape(a, &[1, k])?;
            let out = self.matmul(row, b)?;
            let mut s = self.shape(out).to_vec();
            s.remove(s.len() - 2);
            return self.reshape(out, &s);
        }
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        let (m, k) = (sa[ra - 2], sa[ra - 1]);
        let (k2, n) = (sb[rb - 2], sb[rb - 1]);
        if k != k2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (ba, bb) = (&sa[..ra - 2], &sb[..rb - 2]);
        let batch = broadcast_shape(ba, bb).ok_or_else(|| Error::shape("matmul", &sa, &sb))?;
        let a_strides: Vec<usize> = broadcast_strides(ba, &batch).iter().map(|s| s * m * k).collect();
        let b_strides: Vec<usize> = broadcast_strides(bb, &batch).iter().map(|s| s * k * n).collect();
        let nb = numel(&batch);
        let shared_rhs = numel(bb) == 1 && ba == batch.as_slice();
        let mut value = vec![0.0; nb * m * n];
        {
            let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            if shared_rhs {
                gemm(va, vb, &mut value, nb * m, k, n);
            } else {
                for_each_pair(&batch, &a_strides, &b_strides, |o, ia, ib| {
                    gemm(
                        &va[ia..ia + m * k],
                        &vb[ib..ib + k * n],
                        &mut value[o * m * n..(o + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                });
            }
        }
        count_macs((nb * m * k * n) as u64);
        let mut shape = batch.clone();
        shape.extend([m, n]);
        let rg = self.rg(a.0) || self.rg(b.0);
        let plan = MatMulPlan {
            m,
            k,
            n,
            batch,
            a_strides,
            b_strides,
            shared_rhs,
        };
        Ok(self.push(shape, value, Op::MatMul { a: a.0, b: b.0, plan }, rg))
    }

    // ---- normalization -----------------------------------------------

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::invalid(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = &self.nodes[a.0].value;
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| x[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = (x[at(l)] - max).exp();
                    y[at(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    y[at(l)] /= z;
                }
            }
        }
        let rg = self.rg(a.0);
        Ok(self.push(shape, y, Op::Softmax { a: a.0, axis }, rg))
    }

    /// Normalizes over the last axis: (x - mean) / sqrt(var + eps) * gain + bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().ok_or_else(|| Error::invalid("layer_norm on a scalar"))?;
        for p in [gain, bias] {
            if self.nodes[p.0].shape != [d] {
                return Err(Error::shape("layer_norm", &shape, &self.nodes[p.0].shape));
            }
        }
        let xv = &self.nodes[x.0].value;
        let (gv, bv) = (&self.nodes[gain.0].value, &self.nodes[bias.0].value);
        let rows = xv.len() / d.max(1);
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut y = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                y[r * d + c] = h * gv[c] + bv[c];
            }
        }
        let rg = self.rg(x.0) || self.rg(gain.0) || self.rg(bias.0);
        Ok(self.push(
            shape,
            y,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    // ---- reductions --------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        let rg = self.rg(a.0);
        self.push(Vec::new(), vec![s], Op::Sum { a: a.0 }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sums out `axis` (the axis is removed from the shape).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::invalid(format!("sum axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = &self.nodes[a.0].value;
        let mut y = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    y[o * inner + i] += x[(o * len + l) * inner + i];
                }
            }
        }
        let mut out = shape;
        out.remove(axis);
        let rg = self.rg(a.0);
        Ok(self.push(out, y, Op::SumAxis { a: a.0, axis }, rg))
    }

    // ---- layout ------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let old = &self.nodes[a.0].shape;
        if numel(old) != numel(shape) {
            return Err(Error::shape("reshape", old, shape));
        }
        let value = self.nodes[a.0].value.clone();
        let rg = self.rg(a.0);
        Ok(self.push(shape.to_vec(), value, Op::Reshape { a: a.0 }, rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid(format!("bad permutation {perm:?} for shape {shape:?}")));
        }
        let out: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let src = contiguous_strides(&shape);
        let strides: Vec<usize> = perm.iter().map(|&p| src[p]).collect();
        let zeros = vec![0; out.len()];
        let x = &self.nodes[a.0].value;
        let mut y = vec![0.0; x.len()];
        for_each_pair(&out, &strides, &zeros, |o, i, _| y[o] = x[i]);
        let rg = self.rg(a.0);
        Ok(self.push(out, y, Op::Permute { a: a.0, perm: perm.to_vec() }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.nodes[a.0].shape.len();
        if r < 2 {
            return Err(Error::invalid("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let base = self.nodes[first.0].shape.clone();
        if axis >= base.len() {
            return Err(Error::invalid(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = &self.nodes[p.0].shape;
            let same = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !same {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut out = base.clone();
        out[axis] = total;
        let (outer, _, inner) = split_axis(&out, axis);
        let mut y = vec![0.0; numel(&out)];
        let mut off = 0;
        for p in parts {
            let len = self.nodes[p.0].shape[axis];
            let x = &self.nodes[p.0].value;
            for o in 0..outer {
                let dst = (o * total + off) * inner;
                y[dst..dst + len * inner].copy_from_slice(&x[o * len * inner..(o + 1) * len * inner]);
            }
            off += len;
        }
        let rg = parts.iter().any(|p| self.rg(p.0));
        let ids = parts.iter().map(|p| p.0).collect();
        Ok(self.push(out, y, Op::Concat { parts: ids, axis }, rg))
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::invalid(format!(
                "narrow [{start}, {}) on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let x = &self.nodes[a.0].value;
        let mut y = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let src = (o * full + start) * inner;
            y.extend_from_slice(&x[src..src + len * inner]);
        }
        let mut out = shape;
        out[axis] = len;
        let rg = self.rg(a.0);
        Ok(self.push(out, y, Op::Narrow { a: a.0, axis, start }, rg))
    }

    /// Row gather from a rank-2 table; `None` yields a zero row.
    pub fn gather_rows(&mut self, table: Var, index: &[Option<usize>]) -> Result<Var> {
        let shape = self.nodes[table.0].shape.clone();
        if shape.len() != 2 {
            return Err(Error::invalid(format!("gather_rows needs a rank-2 table, got {shape:?}")));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let t = &self.nodes[table.0].value;
        let mut y = vec![0.0; index.len() * cols];
        for (i, r) in index.iter().enumerate() {
            if let Some(r) = *r {
                if r >= rows {
                    return Err(Error::invalid(format!("gather index {r} out of range for {rows} rows")));
                }
                y[i * cols..(i + 1) * cols].copy_from_slice(&t[r * cols..(r + 1) * cols]);
            }
        }
        let rg = self.rg(table.0);
        Ok(self.push(
            vec![index.len(), cols],
            y,
            Op::Gather {
                table: table.0,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Sliding windows over time: [B,T,C] -> [B,T_out,kernel*C] where output
    /// step t reads input frames t*stride + j - pad for j in 0..kernel.
    pub fn unfold(&mut self, x: Var, kernel: usize, stride: usize, pad: usize, out_len: usize) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() != 3 || kernel == 0 || stride == 0 {
            return Err(Error::invalid(format!("unfold k={kernel} s={stride} on {shape:?}")));
        }
        let (b, t, c) = (shape[0], shape[1], shape[2]);
        let xv = &self.nodes[x.0].value;
        let mut y = vec![0.0; b * out_len * kernel * c];
        for bi in 0..b {
            for to in 0..out_len {
                for j in 0..kernel {
                    let ti = (to * stride + j) as isize - pad as isize;
                    if ti < 0 || ti as usize >= t {
                        continue;
                    }
                    let src = (bi * t + ti as usize) * c;
                    let dst = ((bi * out_len + to) * kernel + j) * c;
                    y[dst..dst + c].copy_from_slice(&xv[src..src + c]);
                }
            }
        }
        let rg = self.rg(x.0);
        Ok(self.push(vec![b, out_len, kernel * c], y, Op::Unfold { x: x.0, kernel, stride, pad }, rg))
    }

    /// Depth-wise convolution over time with one kernel row per head shared
    /// by a contiguous group of d/H channels. `w` is [H, k] and is applied
    /// as given (normalize it first). Zero padding at both ends; `causal`
    /// restricts the window to past and current frames.
    pub fn light_conv(&mut self, x: Var, w: Var, causal: bool) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        if xs.len() != 3 || ws.len() != 2 || ws[0] == 0 || xs[2] % ws[0] != 0 {
            return Err(Error::shape("light_conv", &xs, &ws));
        }
        let (b, t, d) = (xs[0], xs[1], xs[2]);
        let (h, k) = (ws[0], ws[1]);
        let group = d / h;
        let offset = if causal { k - 1 } else { (k - 1) / 2 };
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let mut y = vec![0.0; xv.len()];
        for bi in 0..b {
            for ti in 0..t {
                let dst = (bi * t + ti) * d;
                for j in 0..k {
                    let src_t = ti as isize + j as isize - offset as isize;
                    if src_t < 0 || src_t as usize >= t {
                        continue;
                    }
                    let src = (bi * t + src_t as usize) * d;
                    for c in 0..d {
                        y[dst + c] += wv[(c / group) * k + j] * xv[src + c];
                    }
                }
            }
        }
        count_macs((b * t * d * k) as u64);
        let rg = self.rg(x.0) || self.rg(w.0);
        Ok(self.push(xs, y, Op::LightConv { x: x.0, w: w.0, causal }, rg))
    }

    // ---- reverse sweep -----------------------------------------------

    /// Accumulates d(loss)/d(leaf) into every differentiable leaf reachable
    /// from `loss`. Repeated calls add.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if numel(&self.nodes[loss.0].shape) != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[idx] = Some(g);
                continue;
            }
            for (parent, pg) in self.local_grads(idx, &g) {
                match &mut grads[parent] {
                    Some(acc) => add_into(acc, &pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        for (idx, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                let node = &mut self.nodes[idx];
                match &mut node.grad {
                    Some(acc) => add_into(acc, &g),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `idx` for each differentiable parent.
    fn local_grads(&self, idx: usize, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
        let node = &self.nodes[idx];
        let mut out = Vec::with_capacity(2);
        let wants = |p: usize| self.nodes[p].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (na, nb) = (&self.nodes[*a], &self.nodes[*b]);
                let oshape = &node.shape;
                let ta = broadcast_strides(&na.shape, oshape);
                let tb = broadcast_strides(&nb.shape, oshape);
                let (va, vb) = (&na.value, &nb.value);
                if wants(*a) {
                    let mut ga = vec![0.0; va.len()];
                    for_each_pair(oshape, &ta, &tb, |o, i, j| {
                        ga[i] += match kind {
                            BinaryKind::Add | BinaryKind::Sub => g[o],
                            BinaryKind::Mul => g[o] * vb[j],
                            BinaryKind::Div => g[o] / vb[j],
                        }
                    });
                    out.push((*a, ga));
                }
                if wants(*b) {
                    let mut gb = vec![0.0; vb.len()];
                    for_each_pair(oshape, &ta, &tb, |o, i, j| {
                        gb[j] += match kind {
                            BinaryKind::Add => g[o],
                            BinaryKind::Sub => -g[o],
                            BinaryKind::Mul => g[o] * va[i],
                            BinaryKind::Div => -g[o] * va[i] / (vb[j] * vb[j]),
                        }
                    });
                    out.push((*b, gb));
                }
            }
            Op::Unary { kind, a } => {
                let x = &self.nodes[*a].value;
                let gx = g
                    .iter()
                    .zip(x)
                    .zip(&node.value)
                    .map(|((&g, &x), &y)| g * unary_grad(*kind, x, y))
                    .collect();
                out.push((*a, gx));
            }
            Op::Scale { a, factor } => out.push((*a, g.iter().map(|v| v * factor).collect())),
            Op::Offset { a } | Op::Reshape { a } => out.push((*a, g.to_vec())),
            Op::MatMul { a, b, plan } => {
                let MatMulPlan { m, k, n, .. } = *plan;
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let nb = numel(&plan.batch);
                if wants(*a) {
                    let mut ga = vec![0.0; va.len()];
                    if plan.shared_rhs {
                        gemm_nt(g, vb, &mut ga, nb * m, n, k);
                    } else {
                        for_each_pair(&plan.batch, &plan.a_strides, &plan.b_strides, |o, ia, ib| {
                            gemm_nt(&g[o * m * n..(o + 1) * m * n], &vb[ib..ib + k * n], &mut ga[ia..ia + m * k], m, n, k);
                        });
                    }
                    out.push((*a, ga));
                }
                if wants(*b) {
                    let mut gb = vec![0.0; vb.len()];
                    if plan.shared_rhs {
                        gemm_tn(va, g, &mut gb, nb * m, k, n);
                    } else {
                        for_each_pair(&plan.batch, &plan.a_strides, &plan.b_strides, |o, ia, ib| {
                            gemm_tn(&va[ia..ia + m * k], &g[o * m * n..(o + 1) * m * n], &mut gb[ib..ib + k * n], m, k, n);
                        });
                    }
                    out.push((*b, gb));
                }
            }
            Op::Softmax { a, axis } => {
                let (outer, len, inner) = split_axis(&node.shape, *axis);
                let y = &node.value;
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                        for l in 0..len {
                            gx[at(l)] = y[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
                out.push((*a, gx));
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = *node.shape.last().unwrap();
                let rows = rstd.len();
                let gv = &self.nodes[*gain].value;
                if wants(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let base = r * d;
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..d {
                            let gh = g[base + c] * gv[c];
                            m1 += gh;
                            m2 += gh * xhat[base + c];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for c in 0..d {
                            let gh = g[base + c] * gv[c];
                            gx[base + c] = rstd[r] * (gh - m1 - xhat[base + c] * m2);
                        }
                    }
                    out.push((*x, gx));
                }
                if wants(*gain) {
                    let mut gg = vec![0.0; d];
                    for r in 0..rows {
                        for c in 0..d {
                            gg[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                    out.push((*gain, gg));
                }
                if wants(*bias) {
                    let mut gb = vec![0.0; d];
                    for r in 0..rows {
                        for c in 0..d {
                            gb[c] += g[r * d + c];
                        }
                    }
                    out.push((*bias, gb));
                }
            }
            Op::Sum { a } => {
                let n = self.nodes[*a].value.len();
                out.push((*a, vec![g[0]; n]));
            }
            Op::SumAxis { a, axis } => {
                let shape = &self.nodes[*a].shape;
                let (outer, len, inner) = split_axis(shape, *axis);
                let mut gx = vec![0.0; numel(shape)];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            gx[(o * len + l) * inner + i] = g[o * inner + i];
                        }
                    }
                }
                out.push((*a, gx));
            }
            Op::Permute { a, perm } => {
                let shape = &self.nodes[*a].shape;
                let src = contiguous_strides(shape);
                let strides: Vec<usize> = perm.iter().map(|&p| src[p]).collect();
                let zeros = vec![0; node.shape.len()];
                let mut gx = vec![0.0; g.len()];
                for_each_pair(&node.shape, &strides, &zeros, |o, i, _| gx[i] = g[o]);
                out.push((*a, gx));
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p].shape[*axis];
                    if wants(p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let src = (o * total + off) * inner;
                            gp.extend_from_slice(&g[src..src + len * inner]);
                        }
                        out.push((p, gp));
                    }
                    off += len;
                }
            }
            Op::Narrow { a, axis, start } => {
                let shape = &self.nodes[*a].shape;
                let (outer, full, inner) = split_axis(shape, *axis);
                let len = node.shape[*axis];
                let mut gx = vec![0.0; numel(shape)];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*a, gx));
            }
            Op::Gather { table, index } => {
                let cols = self.nodes[*table].shape[1];
                let mut gt = vec![0.0; self.nodes[*table].value.len()];
                for (i, r) in index.iter().enumerate() {
                    if let Some(r) = *r {
                        add_into(&mut gt[r * cols..(r + 1) * cols], &g[i * cols..(i + 1) * cols]);
                    }
                }
                out.push((*table, gt));
            }
            Op::Unfold { x, kernel, stride, pad } => {
                let shape = &self.nodes[*x].shape;
                let (b, t, c) = (shape[0], shape[1], shape[2]);
                let out_len = node.shape[1];
                let mut gx = vec![0.0; b * t * c];
                for bi in 0..b {
                    for to in 0..out_len {
                        for j in 0..*kernel {
                            let ti = (to * stride + j) as isize - *pad as isize;
                            if ti < 0 || ti as usize >= t {
                                continue;
                            }
                            let dst = (bi * t + ti as usize) * c;
                            let src = ((bi * out_len + to) * kernel + j) * c;
                            add_into(&mut gx[dst..dst + c], &g[src..src + c]);
                        }
                    }
                }
                out.push((*x, gx));
            }
            Op::LightConv { x, w, causal } => {
                let (b, t, d) = (node.shape[0], node.shape[1], node.shape[2]);
                let ws = &self.nodes[*w].shape;
                let (h, k) = (ws[0], ws[1]);
                let group = d / h;
                let offset = if *causal { k - 1 } else { (k - 1) / 2 };
                let xv = &self.nodes[*x].value;
                let wv = &self.nodes[*w].value;
                let want_x = wants(*x);
                let want_w = wants(*w);
                let mut gx = vec![0.0; if want_x { xv.len() } else { 0 }];
                let mut gw = vec![0.0; if want_w { wv.len() } else { 0 }];
                for bi in 0..b {
                    for ti in 0..t {
                        let dst = (bi * t + ti) * d;
                        for j in 0..k {
                            let src_t = ti as isize + j as isize - offset as isize;
                            if src_t < 0 || src_t as usize >= t {
                                continue;
                            }
                            let src = (bi * t + src_t as usize) * d;
                            for c in 0..d {
                                let wi = (c / group) * k + j;
                                if want_x {
                                    gx[src + c] += wv[wi] * g[dst + c];
                                }
                                if want_w {
                                    gw[wi] += xv[src + c] * g[dst + c];
                                }
                            }
                        }
                    }
                }
                if want_x {
                    out.push((*x, gx));
                }
                if want_w {
                    out.push((*w, gw));
                }
            }
        }
        out.retain(|(p, _)| wants(*p));
        out
    }
}
