use std::collections::BTreeMap;

use super::params::ModelParams;
use super::tensor::{Scalar, Tensor};
use super::NnError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Dimensions of a fused attention call. Queries are `[batch * tq, d]`, keys
/// and values `[batch * tk, d]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnShape {
    pub batch: usize,
    pub tq: usize,
    pub tk: usize,
    pub heads: usize,
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LogSoftmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, width: usize, rstd: Vec<T> },
    Concat { parts: Vec<Var>, outer: usize, widths: Vec<usize> },
    Slice { x: Var, outer: usize, src_w: usize, start: usize, w: usize },
    Mean { x: Var, len: usize, inner: usize },
    Sum(Var),
    Gather { x: Var, rows: Vec<usize>, w: usize },
    Select { x: Var, idx: Vec<usize> },
    StackRows { srcs: Vec<(Var, usize)>, w: usize },
    Transpose { x: Var, m: usize, n: usize },
    Reshape(Var),
    NormalizeRows { x: Var, w: usize, norms: Vec<T> },
    Attention { q: Var, k: Var, v: Var, shape: AttnShape, d: usize, probs: Vec<T>, fallback: Vec<bool> },
    L1 { pred: Var, target: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode autodiff recorder. Values are computed eagerly as ops are
/// appended; [`Tape::backward`] walks the record in reverse.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: BTreeMap<String, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> NnError {
    NnError::Shape { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}

/// Split a shape around `axis` into (outer, len, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn matrix_dims(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [m, n] => Some((*m, *n)),
        _ => None,
    }
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), params: BTreeMap::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Named trainable parameter, read from `params` on first use and cached
    /// for the lifetime of the tape.
    pub fn param(&mut self, params: &ModelParams, name: &str) -> Result<Var, NnError> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = params.get(name).ok_or_else(|| NnError::MissingParam(name.to_string()))?;
        let v = self.leaf(t.cast());
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Make later `param(name)` calls resolve to `v`.
    pub fn bind_param(&mut self, name: &str, v: Var) {
        self.params.insert(name.to_string(), v);
    }

    pub fn param_vars(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var, NnError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn row_binary(&mut self, a: Var, row: Var, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var, NnError> {
        let (av, rv) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        let w = last_dim(av.shape());
        if rv.len() != w || av.shape().is_empty() {
            return Err(shape_err(name, av.shape(), rv.shape()));
        }
        let r = rv.data();
        let data = av.data().iter().enumerate().map(|(i, &x)| f(x, r[i % w])).collect();
        let t = Tensor::new(av.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(t, op, rg))
    }

    /// Broadcast-add a vector over the last axis.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NnError> {
        self.row_binary(a, row, "add_row", |x, y| x + y, Op::AddRow(a, row))
    }

    /// Broadcast-multiply a vector over the last axis.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, NnError> {
        self.row_binary(a, row, "mul_row", |x, y| x * y, Op::MulRow(a, row))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let av = &self.nodes[a.0].value;
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| f(x)).collect());
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| T::one() / (T::one() + (-x).exp()), Op::Sigmoid(a))
    }

    // ---- linear algebra ----------------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.matmul_impl(a, b, false)
    }

    /// `[m,k] x [n,k]^T -> [m,n]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, NnError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let err = || shape_err(if trans_b { "matmul_bt" } else { "matmul" }, av.shape(), bv.shape());
        let (m, k) = matrix_dims(av.shape()).ok_or_else(err)?;
        let (b0, b1) = matrix_dims(bv.shape()).ok_or_else(err)?;
        let (kb, n) = if trans_b { (b1, b0) } else { (b0, b1) };
        if k != kb {
            return Err(err());
        }
        let mut out = vec![T::zero(); m * n];
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        T::gemm(m, k, n, av.data(), k as isize, 1, bv.data(), rsb, csb, T::zero(), &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out), Op::MatMul { a, b, m, k, n, trans_b }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NnError> {
        let xv = &self.nodes[x.0].value;
        let (m, n) = matrix_dims(xv.shape()).ok_or_else(|| shape_err("transpose", xv.shape(), &[]))?;
        let d = xv.data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, m], out), Op::Transpose { x, m, n }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NnError> {
        let xv = &self.nodes[x.0].value;
        if shape.iter().product::<usize>() != xv.len() {
            return Err(shape_err("reshape", xv.shape(), shape));
        }
        let t = Tensor::new(shape.to_vec(), xv.data().to_vec());
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    // ---- normalisation -----------------------------------------------------

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, NnError> {
        self.softmax_impl(x, axis, false)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var, NnError> {
        self.softmax_impl(x, axis, true)
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, log: bool) -> Result<Var, NnError> {
        let xv = &self.nodes[x.0].value;
        if axis >= xv.shape().len() {
            return Err(shape_err(if log { "log_softmax" } else { "softmax" }, xv.shape(), &[axis]));
        }
        let (outer, len, inner) = axis_split(xv.shape(), axis);
        let d = xv.data();
        let mut out = vec![T::zero(); d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mx = (0..len).map(|j| d[at(j)]).fold(T::neg_infinity(), T::max);
                let total: T = (0..len).map(|j| (d[at(j)] - mx).exp()).sum();
                for j in 0..len {
                    out[at(j)] =
                        if log { d[at(j)] - mx - total.ln() } else { (d[at(j)] - mx).exp() / total };
                }
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out);
        let rg = self.rg(x);
        let op = if log { Op::LogSoftmax { x, outer, len, inner } } else { Op::Softmax { x, outer, len, inner } };
        Ok(self.push(t, op, rg))
    }

    /// Normalise the last axis to zero mean and unit variance, without an
    /// affine transform. A constant row maps to zeros.
    pub fn layer_norm(&mut self, x: Var) -> Result<Var, NnError> {
        const EPS: f64 = 1e-5;
        let xv = &self.nodes[x.0].value;
        let width = last_dim(xv.shape());
        if xv.shape().is_empty() || width == 0 {
            return Err(shape_err("layer_norm", xv.shape(), &[]));
        }
        let d = xv.data();
        let nf = T::from_f64(width as f64);
        let mut out = vec![T::zero(); d.len()];
        let mut rstd = Vec::with_capacity(d.len() / width);
        for (row, o) in d.chunks(width).zip(out.chunks_mut(width)) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let r = T::one() / (var + T::from_f64(EPS)).sqrt();
            for (oi, &v) in o.iter_mut().zip(row) {
                *oi = (v - mean) * r;
            }
            rstd.push(r);
        }
        let t = Tensor::new(xv.shape().to_vec(), out);
        let rg = self.rg(x);
        Ok(self.push(t, Op::LayerNorm { x, width, rstd }, rg))
    }

    /// Divide each row by its L2 norm (floored at 1e-12).
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var, NnError> {
        let xv = &self.nodes[x.0].value;
        let w = last_dim(xv.shape());
        if xv.shape().is_empty() || w == 0 {
            return Err(shape_err("normalize_rows", xv.shape(), &[]));
        }
        let floor = T::from_f64(1e-12);
        let mut out = vec![T::zero(); xv.len()];
        let mut norms = Vec::new();
        for (row, o) in xv.data().chunks(w).zip(out.chunks_mut(w)) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(floor);
            for (oi, &v) in o.iter_mut().zip(row) {
                *oi = v / n;
            }
            norms.push(n);
        }
        let t = Tensor::new(xv.shape().to_vec(), out);
        let rg = self.rg(x);
        Ok(self.push(t, Op::NormalizeRows { x, w, norms }, rg))
    }

    // ---- structure ---------------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, NnError> {
        let first = parts.first().ok_or_else(|| shape_err("concat", &[], &[]))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", &base, &[axis]));
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut widths = Vec::with_capacity(parts.len());
        let mut total_len = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &base, s));
            }
            widths.push(s[axis] * inner);
            total_len += s[axis];
        }
        let row_w: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * row_w);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[p.0].value.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total_len;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, out), Op::Concat { parts: parts.to_vec(), outer, widths }, rg))
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var, NnError> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start > end || end > s[axis] {
            return Err(shape_err("slice", &s, &[axis, start, end]));
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let src_w = len * inner;
        let w = (end - start) * inner;
        let d = self.nodes[x.0].value.data();
        let mut out = Vec::with_capacity(outer * w);
        for o in 0..outer {
            out.extend_from_slice(&d[o * src_w + start * inner..o * src_w + start * inner + w]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out), Op::Slice { x, outer, src_w, start: start * inner, w }, rg))
    }

    /// Mean over `axis`; the axis is removed from the shape (a rank-1 input
    /// yields shape `[1]`).
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var, NnError> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || s[axis] == 0 {
            return Err(shape_err("mean", &s, &[axis]));
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let d = self.nodes[x.0].value.data();
        let nf = T::from_f64(len as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + d[o * len * inner + j * inner + i];
                }
            }
        }
        for v in &mut out {
            *v = *v / nf;
        }
        let mut shape: Vec<usize> = s.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &v)| v).collect();
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out), Op::Mean { x, len, inner }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Rows of a `[n, w]` table by index; the embedding lookup.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, NnError> {
        let s = self.shape(x).to_vec();
        let (n, w) = matrix_dims(&s).ok_or_else(|| shape_err("gather_rows", &s, &[]))?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(shape_err("gather_rows", &s, &[bad]));
        }
        let d = self.nodes[x.0].value.data();
        let mut out = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            out.extend_from_slice(&d[r * w..(r + 1) * w]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![rows.len(), w], out), Op::Gather { x, rows: rows.to_vec(), w }, rg))
    }

    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var, NnError> {
        self.gather_rows(table, ids)
    }

    /// Flat elements by index, as a rank-1 tensor.
    pub fn select(&mut self, x: Var, idx: &[usize]) -> Result<Var, NnError> {
        let xv = &self.nodes[x.0].value;
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.len()) {
            return Err(shape_err("select", xv.shape(), &[bad]));
        }
        let out = idx.iter().map(|&i| xv.data()[i]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![idx.len()], out), Op::Select { x, idx: idx.to_vec() }, rg))
    }

    /// Assemble a `[srcs.len(), w]` matrix from rows of other matrices.
    pub fn stack_rows(&mut self, srcs: &[(Var, usize)]) -> Result<Var, NnError> {
        let (first, _) = *srcs.first().ok_or_else(|| shape_err("stack_rows", &[], &[]))?;
        let w = last_dim(self.shape(first));
        let mut out = Vec::with_capacity(srcs.len() * w);
        for &(v, r) in srcs {
            let s = self.shape(v);
            let ok = matrix_dims(s).is_some_and(|(n, sw)| sw == w && r < n);
            if !ok {
                return Err(shape_err("stack_rows", &[w], s));
            }
            out.extend_from_slice(self.nodes[v.0].value.row(r));
        }
        let rg = srcs.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(Tensor::new(vec![srcs.len(), w], out), Op::StackRows { srcs: srcs.to_vec(), w }, rg))
    }

    // ---- attention ---------------------------------------------------------

    /// Scaled dot-product attention over pre-projected `q`, `k`, `v`.
    ///
    /// `key_mask[b * tk + j]` set means key `j` of batch item `b` is padding
    /// and receives weight exactly zero. A query row whose keys are all
    /// masked attends to its own position (or uniformly when it has none).
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        key_mask: Option<&[bool]>,
    ) -> Result<Var, NnError> {
        let AttnShape { batch, tq, tk, heads } = shape;
        let qs = self.shape(q).to_vec();
        let (rq, d) = matrix_dims(&qs).ok_or_else(|| shape_err("attention", &qs, &[]))?;
        if rq != batch * tq || heads == 0 || d % heads != 0 {
            return Err(shape_err("attention", &qs, &[batch, tq, heads]));
        }
        for kv in [k, v] {
            let s = self.shape(kv);
            if s != [batch * tk, d] {
                return Err(shape_err("attention", &qs, s));
            }
        }
        if let Some(m) = key_mask {
            if m.len() != batch * tk {
                return Err(shape_err("attention", &[batch * tk], &[m.len()]));
            }
        }
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![T::zero(); rq * d];
        let mut probs = vec![T::zero(); batch * heads * tq * tk];
        let mut fallback = vec![false; batch * heads * tq];
        let mut scores = vec![T::zero(); tk];
        for b in 0..batch {
            let masked = |j: usize| key_mask.is_some_and(|m| m[b * tk + j]);
            for h in 0..heads {
                let off = h * dh;
                for i in 0..tq {
                    let row = (b * heads + h) * tq + i;
                    let p = &mut probs[row * tk..(row + 1) * tk];
                    let qi = &qd[(b * tq + i) * d + off..(b * tq + i) * d + off + dh];
                    let mut mx = T::neg_infinity();
                    for j in 0..tk {
                        if masked(j) {
                            continue;
                        }
                        let kj = &kd[(b * tk + j) * d + off..(b * tk + j) * d + off + dh];
                        let s = qi.iter().zip(kj).map(|(&x, &y)| x * y).sum::<T>() * scale;
                        scores[j] = s;
                        mx = mx.max(s);
                    }
                    if mx == T::neg_infinity() {
                        fallback[row] = true;
                        if i < tk {
                            p[i] = T::one();
                        } else {
                            p.fill(T::one() / T::from_f64(tk as f64));
                        }
                    } else {
                        let mut total = T::zero();
                        for j in 0..tk {
                            if !masked(j) {
                                p[j] = (scores[j] - mx).exp();
                                total = total + p[j];
                            }
                        }
                        for j in 0..tk {
                            if !masked(j) {
                                p[j] = p[j] / total;
                            }
                        }
                    }
                    let o = &mut out[(b * tq + i) * d + off..(b * tq + i) * d + off + dh];
                    for j in 0..tk {
                        if p[j] == T::zero() {
                            continue;
                        }
                        let vj = &vd[(b * tk + j) * d + off..(b * tk + j) * d + off + dh];
                        for (oi, &x) in o.iter_mut().zip(vj) {
                            *oi = *oi + p[j] * x;
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(Tensor::new(vec![rq, d], out), Op::Attention { q, k, v, shape, d, probs, fallback }, rg))
    }

    /// Attention weights recorded by an attention op, laid out
    /// `[batch, heads, tq, tk]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    // ---- losses ------------------------------------------------------------

    /// Mean absolute error against a constant target.
    pub fn l1_loss(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var, NnError> {
        let pv = &self.nodes[pred.0].value;
        if pv.shape() != target.shape() || pv.is_empty() {
            return Err(shape_err("l1_loss", pv.shape(), target.shape()));
        }
        let n = T::from_f64(pv.len() as f64);
        let loss = pv.data().iter().zip(target.data()).map(|(&p, &t)| (p - t).abs()).sum::<T>() / n;
        let rg = self.rg(pred);
        Ok(self.push(Tensor::scalar(loss), Op::L1 { pred, target: target.data().to_vec() }, rg))
    }

    // ---- backward ----------------------------------------------------------

    /// Accumulate gradients of the scalar `loss` into every participating
    /// node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<(), NnError> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", self.shape(loss), &[1]));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.backprop_node(idx, &g);
            }
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()))
    }

    /// Gradients of every named parameter that took part in the loss.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor<T>> {
        self.params.iter().filter_map(|(name, &v)| Some((name.clone(), self.grad(v)?))).collect()
    }

    fn buf(&mut self, v: Var) -> Option<&mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn acc(&mut self, v: Var, f: impl Fn(usize) -> T) {
        if let Some(b) = self.buf(v) {
            for (i, x) in b.iter_mut().enumerate() {
                *x = *x + f(i);
            }
        }
    }

    fn backprop_node(&mut self, idx: usize, g: &[T]) {
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        self.backprop_op(idx, &op, g);
        self.nodes[idx].op = op;
    }

    fn backprop_op(&mut self, idx: usize, op: &Op<T>, g: &[T]) {
        match op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                self.acc(a, |i| g[i]);
                self.acc(b, |i| g[i]);
            }
            &Op::Sub(a, b) => {
                self.acc(a, |i| g[i]);
                self.acc(b, |i| -g[i]);
            }
            &Op::Mul(a, b) => {
                let bv = self.value(b).data().to_vec();
                let av = self.value(a).data().to_vec();
                self.acc(a, |i| g[i] * bv[i]);
                self.acc(b, |i| g[i] * av[i]);
            }
            &Op::AddRow(a, r) => {
                self.acc(a, |i| g[i]);
                let w = self.value(r).len();
                let mut rg = vec![T::zero(); w];
                for (i, &x) in g.iter().enumerate() {
                    rg[i % w] = rg[i % w] + x;
                }
                self.acc(r, |i| rg[i]);
            }
            &Op::MulRow(a, r) => {
                let rv = self.value(r).data().to_vec();
                let av = self.value(a).data().to_vec();
                let w = rv.len();
                self.acc(a, |i| g[i] * rv[i % w]);
                let mut rg = vec![T::zero(); w];
                for (i, &x) in g.iter().enumerate() {
                    rg[i % w] = rg[i % w] + x * av[i];
                }
                self.acc(r, |i| rg[i]);
            }
            &Op::Scale(a, s) => self.acc(a, |i| g[i] * s),
            &Op::Relu(a) => {
                let av = self.value(a).data().to_vec();
                self.acc(a, |i| if av[i] > T::zero() { g[i] } else { T::zero() });
            }
            &Op::Tanh(a) => {
                let y = self.nodes[idx].value.data().to_vec();
                self.acc(a, |i| g[i] * (T::one() - y[i] * y[i]));
            }
            &Op::Sigmoid(a) => {
                let y = self.nodes[idx].value.data().to_vec();
                self.acc(a, |i| g[i] * y[i] * (T::one() - y[i]));
            }
            &Op::MatMul { a, b, m, k, n, trans_b } => {
                let av = self.value(a).data().to_vec();
                let bv = self.value(b).data().to_vec();
                if let Some(ga) = self.buf(a) {
                    // dA = G · op(B)^T
                    let (rsb, csb) = if trans_b { (k as isize, 1) } else { (1, n as isize) };
                    T::gemm(m, n, k, g, n as isize, 1, &bv, rsb, csb, T::one(), ga);
                }
                if let Some(gb) = self.buf(b) {
                    if trans_b {
                        // dB = G^T · A, shape [n,k]
                        T::gemm(n, m, k, g, 1, n as isize, &av, k as isize, 1, T::one(), gb);
                    } else {
                        // dB = A^T · G, shape [k,n]
                        T::gemm(k, m, n, &av, 1, k as isize, g, n as isize, 1, T::one(), gb);
                    }
                }
            }
            &Op::Transpose { x, m, n } => self.acc(x, |i| {
                let (r, c) = (i / n, i % n);
                g[c * m + r]
            }),
            &Op::Reshape(x) => self.acc(x, |i| g[i]),
            &Op::Softmax { x, outer, len, inner } => {
                let y = self.nodes[idx].value.data().to_vec();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                self.acc(x, |i| dx[i]);
            }
            &Op::LogSoftmax { x, outer, len, inner } => {
                let y = self.nodes[idx].value.data().to_vec();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let gs: T = (0..len).map(|j| g[at(j)]).sum();
                        for j in 0..len {
                            dx[at(j)] = g[at(j)] - y[at(j)].exp() * gs;
                        }
                    }
                }
                self.acc(x, |i| dx[i]);
            }
            Op::LayerNorm { x, width, rstd } => {
                let y = self.nodes[idx].value.data().to_vec();
                let w = *width;
                let nf = T::from_f64(w as f64);
                let mut dx = vec![T::zero(); y.len()];
                for (r, &rs) in rstd.iter().enumerate() {
                    let (yr, gr) = (&y[r * w..(r + 1) * w], &g[r * w..(r + 1) * w]);
                    let mg = gr.iter().copied().sum::<T>() / nf;
                    let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / nf;
                    for j in 0..w {
                        dx[r * w + j] = rs * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                self.acc(*x, |i| dx[i]);
            }
            Op::NormalizeRows { x, w, norms } => {
                let y = self.nodes[idx].value.data().to_vec();
                let w = *w;
                let mut dx = vec![T::zero(); y.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let (yr, gr) = (&y[r * w..(r + 1) * w], &g[r * w..(r + 1) * w]);
                    let dot = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>();
                    for j in 0..w {
                        dx[r * w + j] = (gr[j] - yr[j] * dot) / n;
                    }
                }
                self.acc(*x, |i| dx[i]);
            }
            Op::Concat { parts, outer, widths } => {
                let row_w: usize = widths.iter().sum();
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    let outer = *outer;
                    if let Some(b) = self.buf(p) {
                        for o in 0..outer {
                            for c in 0..w {
                                b[o * w + c] = b[o * w + c] + g[o * row_w + off + c];
                            }
                        }
                    }
                    off += w;
                }
            }
            &Op::Slice { x, outer, src_w, start, w } => {
                if let Some(b) = self.buf(x) {
                    for o in 0..outer {
                        for c in 0..w {
                            let t = o * src_w + start + c;
                            b[t] = b[t] + g[o * w + c];
                        }
                    }
                }
            }
            &Op::Mean { x, len, inner } => {
                let nf = T::from_f64(len as f64);
                self.acc(x, |i| {
                    let o = i / (len * inner);
                    let r = i % inner;
                    g[o * inner + r] / nf
                });
            }
            &Op::Sum(x) => self.acc(x, |_| g[0]),
            Op::Gather { x, rows, w } => {
                if let Some(b) = self.buf(*x) {
                    for (o, &r) in rows.iter().enumerate() {
                        for c in 0..*w {
                            b[r * w + c] = b[r * w + c] + g[o * w + c];
                        }
                    }
                }
            }
            Op::Select { x, idx: sel } => {
                if let Some(b) = self.buf(*x) {
                    for (o, &i) in sel.iter().enumerate() {
                        b[i] = b[i] + g[o];
                    }
                }
            }
            Op::StackRows { srcs, w } => {
                for (o, &(v, r)) in srcs.iter().enumerate() {
                    if let Some(b) = self.buf(v) {
                        for c in 0..*w {
                            b[r * w + c] = b[r * w + c] + g[o * w + c];
                        }
                    }
                }
            }
            Op::Attention { q, k, v, shape, d, probs, fallback } => {
                self.backprop_attention(*q, *k, *v, *shape, *d, probs, fallback, g);
            }
            Op::L1 { pred, target } => {
                let pv = self.value(*pred).data().to_vec();
                let n = T::from_f64(pv.len() as f64);
                let g0 = g[0];
                self.acc(*pred, |i| {
                    let diff = pv[i] - target[i];
                    let s = if diff > T::zero() {
                        T::one()
                    } else if diff < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    g0 * s / n
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        d: usize,
        probs: &[T],
        fallback: &[bool],
        g: &[T],
    ) {
        let AttnShape { batch, tq, tk, heads } = shape;
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let qd = self.value(q).data().to_vec();
        let kd = self.value(k).data().to_vec();
        let vd = self.value(v).data().to_vec();
        let mut dq = vec![T::zero(); qd.len()];
        let mut dk = vec![T::zero(); kd.len()];
        let mut dv = vec![T::zero(); vd.len()];
        let mut dp = vec![T::zero(); tk];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..tq {
                    let row = (b * heads + h) * tq + i;
                    let p = &probs[row * tk..(row + 1) * tk];
                    let qo = (b * tq + i) * d + off;
                    let go = &g[qo..qo + dh];
                    for j in 0..tk {
                        let vo = (b * tk + j) * d + off;
                        dp[j] = go.iter().zip(&vd[vo..vo + dh]).map(|(&a, &c)| a * c).sum();
                        if p[j] != T::zero() {
                            for c in 0..dh {
                                dv[vo + c] = dv[vo + c] + p[j] * go[c];
                            }
                        }
                    }
                    if fallback[row] {
                        continue;
                    }
                    let dot: T = (0..tk).map(|j| p[j] * dp[j]).sum();
                    for j in 0..tk {
                        if p[j] == T::zero() {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - dot) * scale;
                        let ko = (b * tk + j) * d + off;
                        for c in 0..dh {
                            dq[qo + c] = dq[qo + c] + ds * kd[ko + c];
                            dk[ko + c] = dk[ko + c] + ds * qd[qo + c];
                        }
                    }
                }
            }
        }
        self.acc(q, |i| dq[i]);
        self.acc(k, |i| dk[i]);
        self.acc(v, |i| dv[i]);
    }
}
