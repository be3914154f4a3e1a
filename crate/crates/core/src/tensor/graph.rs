//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Values
//! are immutable once recorded. [`Graph::backward`] walks the record in reverse
//! and returns a [`Gradients`] table; parameter gradients are then folded into
//! a [`ParamStore`] with [`Gradients::accumulate_into`], which adds to whatever
//! the store already holds. The optimizer clears them after each step.

use std::cell::RefCell;
use std::collections::BTreeMap;

use super::ops::{self, gelu_derivative};
use super::{gemm, MatMut, MatRef, ParamId, ParamStore, Result, Tensor, TensorError};
use crate::scalar::Scalar;

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, seq_len: usize, probs: Vec<T> },
    GatherRows { x: Var, index: Vec<usize> },
    FillRows { x: Var, token: Var, source: Vec<Option<usize>> },
    MeanSegments { x: Var, seq_len: usize },
    Sum(Var),
    Mse { pred: Var, target: Tensor<T> },
    BceWithLogits { logits: Var, target: Tensor<T> },
    SoftmaxCrossEntropy { logits: Var, target: Tensor<T>, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Operation record. One thread builds and differentiates a graph at a time.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    bound: RefCell<BTreeMap<ParamId, Var>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), bound: RefCell::new(BTreeMap::new()) }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    /// Records a value that is not differentiated.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a differentiable input whose gradient can be read back from
    /// [`Gradients::wrt`].
    pub fn input(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored parameter. Binding the same id twice returns the same var.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.borrow().get(&id) {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Param(id), true);
        self.bound.borrow_mut().insert(id, v);
        v
    }

    /// Parameters bound into this graph so far.
    pub fn bound_params(&self) -> Vec<ParamId> {
        self.bound.borrow().keys().copied().collect()
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(&self.value(a), &self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), self.needs(&[a, b])))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(&self.value(a), &self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), self.needs(&[a, b])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = ops::sub(&self.value(a), &self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b), self.needs(&[a, b])))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(&self.value(a), &self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b), self.needs(&[a, b])))
    }

    pub fn scale(&self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * c).check_finite("scale")?;
        Ok(self.push(out, Op::Scale(a, c), self.needs(&[a])))
    }

    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let out = ops::add_bias(&self.value(x), &self.value(bias))?;
        Ok(self.push(out, Op::AddBias(x, bias), self.needs(&[x, bias])))
    }

    /// `x·w + b`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let out = ops::softmax(&self.value(x), axis)?;
        Ok(self.push(out, Op::Softmax { x, axis }, self.needs(&[x])))
    }

    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (out, xhat, rstd) = ops::layer_norm_parts(&self.value(x), &self.value(gamma), &self.value(beta), eps)?;
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, self.needs(&[x, gamma, beta])))
    }

    pub fn gelu(&self, x: Var) -> Result<Var> {
        let out = ops::gelu(&self.value(x)).check_finite("gelu")?;
        Ok(self.push(out, Op::Gelu(x), self.needs(&[x])))
    }

    /// Multi-head self-attention over `rows / seq_len` independent segments.
    pub fn attention(&self, q: Var, k: Var, v: Var, heads: usize, seq_len: usize) -> Result<Var> {
        let (out, probs) = ops::attention_parts(&self.value(q), &self.value(k), &self.value(v), heads, seq_len)?;
        Ok(self.push(out, Op::Attention { q, k, v, heads, seq_len, probs }, self.needs(&[q, k, v])))
    }

    /// Output row `r` is input row `index[r]`.
    pub fn gather_rows(&self, x: Var, index: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.rows()) {
            return Err(TensorError::Contract(format!("gather_rows: index {bad} >= {} rows", xv.rows())));
        }
        let mut out = Vec::with_capacity(index.len() * cols);
        for &i in index {
            out.extend_from_slice(xv.row(i));
        }
        let out = Tensor::new([index.len(), cols], out)?;
        Ok(self.push(out, Op::GatherRows { x, index: index.to_vec() }, self.needs(&[x])))
    }

    /// Output row `r` is `x[source[r]]`, or `token` where `source[r]` is `None`.
    pub fn fill_rows(&self, x: Var, token: Var, source: &[Option<usize>]) -> Result<Var> {
        let xv = self.value(x);
        let tv = self.value(token);
        let cols = xv.cols();
        if tv.len() != cols {
            return Err(TensorError::ShapeMismatch { op: "fill_rows", lhs: xv.shape().to_vec(), rhs: tv.shape().to_vec() });
        }
        let mut out = Vec::with_capacity(source.len() * cols);
        for s in source {
            match *s {
                Some(i) if i < xv.rows() => out.extend_from_slice(xv.row(i)),
                Some(i) => return Err(TensorError::Contract(format!("fill_rows: source row {i} >= {}", xv.rows()))),
                None => out.extend_from_slice(tv.data()),
            }
        }
        let out = Tensor::new([source.len(), cols], out)?;
        Ok(self.push(out, Op::FillRows { x, token, source: source.to_vec() }, self.needs(&[x, token])))
    }

    /// Mean over each consecutive block of `seq_len` rows.
    pub fn mean_segments(&self, x: Var, seq_len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(TensorError::Contract(format!("mean_segments: {rows} rows not divisible by {seq_len}")));
        }
        let segs = rows / seq_len;
        let inv = T::one() / T::lit(seq_len as f64);
        let mut out = vec![T::zero(); segs * cols];
        for (r, row) in xv.data().chunks(cols).enumerate() {
            let dst = &mut out[(r / seq_len) * cols..][..cols];
            for (d, &v) in dst.iter_mut().zip(row) {
                *d += v * inv;
            }
        }
        let out = Tensor::new([segs, cols], out)?;
        Ok(self.push(out, Op::MeanSegments { x, seq_len }, self.needs(&[x])))
    }

    /// Sum of all elements.
    pub fn sum(&self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let out = Tensor::scalar(s).check_finite("sum")?;
        Ok(self.push(out, Op::Sum(x), self.needs(&[x])))
    }

    /// Per-element mean of squared differences against a fixed target.
    pub fn mse(&self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(TensorError::ShapeMismatch { op: "mse", lhs: p.shape().to_vec(), rhs: target.shape().to_vec() });
        }
        let sq: T = p.data().iter().zip(target.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let out = Tensor::scalar(sq / T::lit(p.len() as f64)).check_finite("mse")?;
        Ok(self.push(out, Op::Mse { pred, target: target.clone() }, self.needs(&[pred])))
    }

    /// Mean binary cross-entropy of per-element sigmoid probabilities.
    pub fn bce_with_logits(&self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != target.shape() {
            return Err(TensorError::ShapeMismatch { op: "bce", lhs: z.shape().to_vec(), rhs: target.shape().to_vec() });
        }
        let total: T = z
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &t)| x.max(T::zero()) - x * t + (-x.abs()).exp().ln_1p())
            .sum();
        let out = Tensor::scalar(total / T::lit(z.len() as f64)).check_finite("bce")?;
        Ok(self.push(out, Op::BceWithLogits { logits, target: target.clone() }, self.needs(&[logits])))
    }

    /// Mean over rows of `−Σ target·log softmax(logits)`; targets may be soft.
    pub fn softmax_cross_entropy(&self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != target.shape() {
            return Err(TensorError::ShapeMismatch { op: "cross_entropy", lhs: z.shape().to_vec(), rhs: target.shape().to_vec() });
        }
        let cols = z.cols();
        let mut probs = z.data().to_vec();
        let mut total = T::zero();
        for (row, (zr, tr)) in probs.chunks_mut(cols).zip(z.data().chunks(cols).zip(target.data().chunks(cols))) {
            let max = zr.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + zr.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            for ((p, &zv), &tv) in row.iter_mut().zip(zr).zip(tr) {
                total -= tv * (zv - lse);
                *p = (zv - lse).exp();
            }
        }
        let out = Tensor::scalar(total / T::lit(z.rows() as f64)).check_finite("cross_entropy")?;
        Ok(self.push(out, Op::SoftmaxCrossEntropy { logits, target: target.clone(), probs }, self.needs(&[logits])))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let loss_value = &nodes[loss.0].value;
        if loss_value.len() != 1 {
            return Err(TensorError::NotScalar { shape: loss_value.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut out = Vec::with_capacity(nodes.len());
        for (node, g) in nodes.iter().zip(grads) {
            out.push(g.map(|g| Tensor::new(node.value.shape(), g).expect("grad shape matches value")));
        }
        for g in out.iter().flatten() {
            if !g.is_finite() {
                return Err(TensorError::NonFinite { op: "backward" });
            }
        }
        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, Var(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: out, params })
    }
}

fn slot<'a, T: Scalar>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> Option<&'a mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]))
}

fn backprop_node<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf | Op::Param(_) => {}
        &Op::MatMul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            let gm = MatRef::new(g, m, n);
            if let Some(ga) = slot(grads, nodes, a) {
                gemm(T::one(), gm, bv.as_mat().t(), T::one(), MatMut::new(ga, m, k));
            }
            if let Some(gb) = slot(grads, nodes, b) {
                gemm(T::one(), av.as_mat().t(), gm, T::one(), MatMut::new(gb, k, n));
            }
        }
        &Op::Add(a, b) => {
            for (v, sign) in [(a, T::one()), (b, T::one())] {
                if let Some(ga) = slot(grads, nodes, v) {
                    ga.iter_mut().zip(g).for_each(|(d, &s)| *d += sign * s);
                }
            }
        }
        &Op::Sub(a, b) => {
            for (v, sign) in [(a, T::one()), (b, -T::one())] {
                if let Some(ga) = slot(grads, nodes, v) {
                    ga.iter_mut().zip(g).for_each(|(d, &s)| *d += sign * s);
                }
            }
        }
        &Op::Mul(a, b) => {
            for (v, other) in [(a, b), (b, a)] {
                let ov = val(other).data();
                if let Some(ga) = slot(grads, nodes, v) {
                    ga.iter_mut().zip(g).zip(ov).for_each(|((d, &s), &o)| *d += s * o);
                }
            }
        }
        &Op::Scale(a, c) => {
            if let Some(ga) = slot(grads, nodes, a) {
                ga.iter_mut().zip(g).for_each(|(d, &s)| *d += c * s);
            }
        }
        &Op::AddBias(x, b) => {
            if let Some(gx) = slot(grads, nodes, x) {
                gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
            }
            let cols = val(b).len();
            if let Some(gb) = slot(grads, nodes, b) {
                for row in g.chunks(cols) {
                    gb.iter_mut().zip(row).for_each(|(d, &s)| *d += s);
                }
            }
        }
        &Op::Softmax { x, axis } => {
            let y = node.value.data();
            let dims = node.value.shape();
            let outer: usize = dims[..axis].iter().product();
            let n = dims[axis];
            let inner: usize = dims[axis + 1..].iter().product();
            if let Some(gx) = slot(grads, nodes, x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| o * n * inner + i + j * inner;
                        let dot: T = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..n {
                            gx[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let cols = val(*gamma).len();
            let gam = val(*gamma).data().to_vec();
            if let Some(gg) = slot(grads, nodes, *gamma) {
                for (gr, hr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                    for c in 0..cols {
                        gg[c] += gr[c] * hr[c];
                    }
                }
            }
            if let Some(gb) = slot(grads, nodes, *beta) {
                for gr in g.chunks(cols) {
                    gb.iter_mut().zip(gr).for_each(|(d, &s)| *d += s);
                }
            }
            if let Some(gx) = slot(grads, nodes, *x) {
                let n = T::lit(cols as f64);
                let mut dh = vec![T::zero(); cols];
                for (r, (gr, hr)) in g.chunks(cols).zip(xhat.chunks(cols)).enumerate() {
                    for c in 0..cols {
                        dh[c] = gr[c] * gam[c];
                    }
                    let sum_dh: T = dh.iter().copied().sum();
                    let sum_dh_h: T = dh.iter().zip(hr).map(|(&d, &h)| d * h).sum();
                    let k = rstd[r] / n;
                    let dst = &mut gx[r * cols..][..cols];
                    for c in 0..cols {
                        dst[c] += k * (n * dh[c] - sum_dh - hr[c] * sum_dh_h);
                    }
                }
            }
        }
        &Op::Gelu(x) => {
            let xv = val(x).data();
            if let Some(gx) = slot(grads, nodes, x) {
                gx.iter_mut().zip(g).zip(xv).for_each(|((d, &s), &v)| *d += s * gelu_derivative(v));
            }
        }
        Op::Attention { q, k, v, heads, seq_len, probs } => {
            attention_backward(nodes, g, grads, (*q, *k, *v), *heads, *seq_len, probs);
        }
        Op::GatherRows { x, index } => {
            let cols = node.value.cols();
            if let Some(gx) = slot(grads, nodes, *x) {
                for (r, &i) in index.iter().enumerate() {
                    let src = &g[r * cols..][..cols];
                    gx[i * cols..][..cols].iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                }
            }
        }
        Op::FillRows { x, token, source } => {
            let cols = node.value.cols();
            if let Some(gx) = slot(grads, nodes, *x) {
                for (r, s) in source.iter().enumerate() {
                    if let Some(i) = *s {
                        let src = &g[r * cols..][..cols];
                        gx[i * cols..][..cols].iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            if let Some(gt) = slot(grads, nodes, *token) {
                for (r, s) in source.iter().enumerate() {
                    if s.is_none() {
                        gt.iter_mut().zip(&g[r * cols..][..cols]).for_each(|(d, &s)| *d += s);
                    }
                }
            }
        }
        &Op::MeanSegments { x, seq_len } => {
            let cols = node.value.cols();
            let inv = T::one() / T::lit(seq_len as f64);
            if let Some(gx) = slot(grads, nodes, x) {
                for (r, dst) in gx.chunks_mut(cols).enumerate() {
                    let src = &g[(r / seq_len) * cols..][..cols];
                    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s * inv);
                }
            }
        }
        &Op::Sum(x) => {
            if let Some(gx) = slot(grads, nodes, x) {
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mse { pred, target } => {
            let p = val(*pred).data();
            let k = g[0] * T::lit(2.0) / T::lit(p.len() as f64);
            if let Some(gp) = slot(grads, nodes, *pred) {
                gp.iter_mut().zip(p).zip(target.data()).for_each(|((d, &a), &b)| *d += k * (a - b));
            }
        }
        Op::BceWithLogits { logits, target } => {
            let z = val(*logits).data();
            let k = g[0] / T::lit(z.len() as f64);
            if let Some(gz) = slot(grads, nodes, *logits) {
                gz.iter_mut().zip(z).zip(target.data()).for_each(|((d, &x), &t)| {
                    let sig = T::one() / (T::one() + (-x).exp());
                    *d += k * (sig - t);
                });
            }
        }
        Op::SoftmaxCrossEntropy { logits, target, probs } => {
            let cols = val(*logits).cols();
            let k = g[0] / T::lit(val(*logits).rows() as f64);
            if let Some(gz) = slot(grads, nodes, *logits) {
                for ((dst, pr), tr) in gz.chunks_mut(cols).zip(probs.chunks(cols)).zip(target.data().chunks(cols)) {
                    let mass: T = tr.iter().copied().sum();
                    for c in 0..cols {
                        dst[c] += k * (pr[c] * mass - tr[c]);
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Scalar>(
    nodes: &[Node<T>],
    g: &[T],
    grads: &mut [Option<Vec<T>>],
    (q, k, v): (Var, Var, Var),
    heads: usize,
    seq_len: usize,
    probs: &[T],
) {
    let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
    let (rows, dim) = (qv.rows(), qv.cols());
    let dh = dim / heads;
    let segments = rows / seq_len;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let block = seq_len * seq_len;
    let l = seq_len;

    let mut dq = vec![T::zero(); rows * dim];
    let mut dk = vec![T::zero(); rows * dim];
    let mut dv = vec![T::zero(); rows * dim];
    let mut dp = vec![T::zero(); block];
    let gfull = MatRef::new(g, rows, dim);
    for s in 0..segments {
        for h in 0..heads {
            let p = &probs[(s * heads + h) * block..][..block];
            let pm = MatRef::new(p, l, l);
            let go = gfull.rows_slice(s * l, l).cols_slice(h * dh, dh);
            let qs = qv.as_mat().rows_slice(s * l, l).cols_slice(h * dh, dh);
            let ks = kv.as_mat().rows_slice(s * l, l).cols_slice(h * dh, dh);
            let vs = vv.as_mat().rows_slice(s * l, l).cols_slice(h * dh, dh);

            gemm(T::one(), pm.t(), go, T::one(), MatMut::new(&mut dv, rows, dim).rows_slice(s * l, l).cols_slice(h * dh, dh));
            gemm(T::one(), go, vs.t(), T::zero(), MatMut::new(&mut dp, l, l));
            for (dr, pr) in dp.chunks_mut(l).zip(p.chunks(l)) {
                let dot: T = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                dr.iter_mut().zip(pr).for_each(|(d, &pv)| *d = pv * (*d - dot));
            }
            let ds = MatRef::new(&dp, l, l);
            gemm(scale, ds, ks, T::one(), MatMut::new(&mut dq, rows, dim).rows_slice(s * l, l).cols_slice(h * dh, dh));
            gemm(scale, ds.t(), qs, T::one(), MatMut::new(&mut dk, rows, dim).rows_slice(s * l, l).cols_slice(h * dh, dh));
        }
    }
    for (var, d) in [(q, dq), (k, dk), (v, dv)] {
        if let Some(dst) = slot(grads, nodes, var) {
            dst.iter_mut().zip(&d).for_each(|(a, &b)| *a += b);
        }
    }
}

/// Gradient table produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if `v` was reachable.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds parameter gradients into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for &(id, v) in &self.params {
            if let Some(g) = self.wrt(v) {
                let p = store.get_mut(id);
                p.grad.data_mut().iter_mut().zip(g.data()).for_each(|(d, &s)| *d += s);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let g = Graph::<f64>::new();
        let x = g.input(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().item(), 6.0);
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros([2]));
        assert!(matches!(g.backward(x), Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn param_grads_accumulate_until_cleared() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Tensor::scalar(2.0)).unwrap();
        for _ in 0..2 {
            let g = Graph::new();
            let w = g.param(&store, id);
            let y = g.mul(w, w).unwrap();
            g.backward(y).unwrap().accumulate_into(&mut store);
        }
        assert_eq!(store.get(id).grad.item(), 8.0);
        store.zero_grads();
        assert_eq!(store.get(id).grad.item(), 0.0);
    }

    #[test]
    fn constants_get_no_gradient() {
        let g = Graph::<f64>::new();
        let c = g.constant(Tensor::scalar(1.0));
        let x = g.input(Tensor::scalar(2.0));
        let y = g.mul(c, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.wrt(c).is_none());
        assert_eq!(grads.wrt(x).unwrap().item(), 1.0);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let g = Graph::<f64>::new();
        let x = g.input(Tensor::scalar(f64::MAX));
        assert!(matches!(g.scale(x, 10.0), Err(TensorError::NonFinite { .. })));
    }
}
