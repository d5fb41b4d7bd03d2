//! Wengert tape for reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Parameter leaves
//! borrow their values from a [`ParamStore`](super::ParamStore) for the
//! lifetime `'p`, so building a graph never copies weights. `backward` replays
//! the tape in reverse and returns the gradients of parameter leaves keyed by
//! name; the caller folds them into the store once the graph is dropped.

use std::borrow::Cow;
use std::collections::BTreeMap;

use rand::Rng;

use super::kernels;
use super::{ParamStore, Result, Tensor, TensorError};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Gelu(Var),
    Softmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Mask(Var, Vec<f32>),
    Bce {
        logits: Var,
        targets: Vec<f32>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f32>,
        count: usize,
    },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    needs_grad: bool,
    param: Option<&'p str>,
}

/// Parameter gradients produced by one backward pass, keyed by parameter name.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    grads: BTreeMap<String, Vec<f32>>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.grads.get(name).map(Vec::as_slice)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.grads.keys().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds each gradient into the `grad` buffer of the matching trainable
    /// tensor in `store`. Names the store does not own are skipped.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (name, g) in &self.grads {
            if let Some(t) = store.get_mut(name) {
                if !t.requires_grad {
                    continue;
                }
                match &mut t.grad {
                    Some(buf) => buf.iter_mut().zip(g).for_each(|(b, v)| *b += v),
                    None => t.grad = Some(g.clone()),
                }
            }
        }
    }

    /// Sums another gradient set into this one.
    pub fn merge(&mut self, other: Gradients) {
        for (name, g) in other.grads {
            match self.grads.get_mut(&name) {
                Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, v)| *b += v),
                None => {
                    self.grads.insert(name, g);
                }
            }
        }
    }
}

pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    grads: Vec<Option<Vec<f32>>>,
    grad_enabled: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn add_into(dst: &mut Option<Vec<f32>>, src: &[f32]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that never tracks gradients; used for inference.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.grad_enabled,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Cow::Owned(value), op, needs)
    }

    /// Leaf owning `tensor`; tracked iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad;
        self.push(Cow::Owned(tensor), Op::Leaf, rg)
    }

    /// Untracked leaf.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(Cow::Owned(tensor), Op::Leaf, false)
    }

    /// Untracked leaf borrowing an existing tensor.
    pub fn constant_ref(&mut self, tensor: &'p Tensor) -> Var {
        self.push(Cow::Borrowed(tensor), Op::Leaf, false)
    }

    /// Leaf borrowing the named parameter; tracked iff it is trainable.
    pub fn param(&mut self, store: &'p ParamStore, name: &str) -> Result<Var> {
        let (key, t) = store
            .entry(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        let v = self.push(Cow::Borrowed(t), Op::Leaf, t.requires_grad);
        self.nodes[v.0].param = Some(key);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated on `v` by the last `backward` call.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ── Operations ────────────────────────────────────────────────────

    /// `a[m,k] · b[k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = Tensor::from_parts(vec![m, n], kernels::matmul(ta.data(), tb.data(), m, k, n));
        Ok(self.derived(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a[m,k] · b[n,k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(shape_err("matmul_nt", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
        let out = Tensor::from_parts(vec![m, n], kernels::matmul_nt(ta.data(), tb.data(), m, k, n));
        Ok(self.derived(out, Op::MatMulNt(a, b), &[a, b]))
    }

    /// Elementwise sum of equal shapes, or `x[.., n] + row[n]` broadcast over rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
            let out = Tensor::from_parts(ta.shape().to_vec(), data);
            return Ok(self.derived(out, Op::Add(a, b), &[a, b]));
        }
        if tb.rank() == 1 && ta.cols() == tb.numel() {
            let n = tb.numel();
            let mut data = ta.data().to_vec();
            for row in data.chunks_mut(n) {
                row.iter_mut().zip(tb.data()).for_each(|(x, y)| *x += y);
            }
            let out = Tensor::from_parts(ta.shape().to_vec(), data);
            return Ok(self.derived(out, Op::AddRow(a, b), &[a, b]));
        }
        Err(shape_err("add", ta, tb))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.derived(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let ta = self.value(a);
        let out = Tensor::from_parts(ta.shape().to_vec(), ta.data().iter().map(|x| x * s).collect());
        self.derived(out, Op::Scale(a, s), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| kernels::gelu(x)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.derived(out, Op::Gelu(a), &[a])
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let rank = tx.rank();
        if axis >= rank {
            return Err(TensorError::Axis { axis, rank });
        }
        let shape = tx.shape();
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let out = Tensor::from_parts(shape.to_vec(), kernels::softmax(tx.data(), outer, n, inner));
        Ok(self.derived(out, Op::Softmax { x, outer, n, inner }, &[x]))
    }

    /// Normalizes each row over the last dimension, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = tx.cols();
        if tg.shape() != [d] {
            return Err(shape_err("layer_norm", tx, tg));
        }
        if tb.shape() != [d] {
            return Err(shape_err("layer_norm", tx, tb));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0f32; tx.numel()];
        let mut rstd = vec![0.0f32; rows];
        let mut out = vec![0.0f32; tx.numel()];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps as f64).sqrt();
            rstd[r] = rs as f32;
            for j in 0..d {
                let h = ((row[j] as f64 - mean) * rs) as f32;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), out);
        Ok(self.derived(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Gathers rows of `table[V,d]`; the result is `[ids.len(), d]`.
    pub fn embedding(&mut self, ids: &[usize], table: Var) -> Result<Var> {
        let tt = self.value(table);
        if tt.rank() != 2 {
            return Err(TensorError::Shape {
                op: "embedding",
                lhs: vec![ids.len()],
                rhs: tt.shape().to_vec(),
            });
        }
        let (v, d) = (tt.shape()[0], tt.shape()[1]);
        if ids.is_empty() {
            return Err(TensorError::InvalidShape {
                shape: vec![0, d],
                len: 0,
            });
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::Vocab { id, vocab: v });
            }
            data.extend_from_slice(tt.row(id));
        }
        let out = Tensor::from_parts(vec![ids.len(), d], data);
        Ok(self.derived(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Columns `[start, start + len)` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 || len == 0 || start + len > tx.shape()[1] {
            return Err(TensorError::Shape {
                op: "slice_cols",
                lhs: tx.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let mut data = Vec::with_capacity(tx.rows() * len);
        for r in 0..tx.rows() {
            data.extend_from_slice(&tx.row(r)[start..start + len]);
        }
        let out = Tensor::from_parts(vec![tx.rows(), len], data);
        Ok(self.derived(out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or(TensorError::InvalidShape {
            shape: vec![],
            len: 0,
        })?);
        let rows = first.shape()[0];
        for p in parts {
            let t = self.value(*p);
            if t.rank() != 2 || t.shape()[0] != rows {
                return Err(shape_err("concat_cols", first, t));
            }
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).shape()[1]).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let out = Tensor::from_parts(vec![rows, cols], data);
        Ok(self.derived(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.derived(out, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&v| v as f64).sum::<f64>() as f32;
        self.derived(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().map(|&v| v as f64).sum::<f64>() / t.numel() as f64;
        self.derived(Tensor::scalar(s as f32), Op::Mean(x), &[x])
    }

    /// Inverted dropout. `p == 0` returns `x` unchanged and records nothing.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f32, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let tx = self.value(x);
        let mask: Vec<f32> = (0..tx.numel())
            .map(|_| if rng.random::<f32>() < p { 0.0 } else { keep })
            .collect();
        let data = tx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        self.derived(out, Op::Mask(x, mask), &[x])
    }

    /// Mean binary cross-entropy of `logits[L]` against 0/1 `targets`,
    /// in the `max(z,0) - z·t + ln(1 + e^-|z|)` form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f32]) -> Result<Var> {
        let tz = self.value(logits);
        if tz.numel() != targets.len() {
            return Err(TensorError::Length {
                left: tz.numel(),
                right: targets.len(),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(TensorError::NonBinaryTarget(bad));
        }
        let total: f64 = tz
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &t)| (z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()) as f64)
            .sum();
        let loss = Tensor::scalar((total / targets.len() as f64) as f32);
        Ok(self.derived(
            loss,
            Op::Bce {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        ))
    }

    /// Mean `-log softmax(logits[t])[targets[t]]` over positions whose target is not `pad_id`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad_id: usize) -> Result<Var> {
        let tz = self.value(logits);
        if tz.rank() != 2 || tz.shape()[0] != targets.len() {
            return Err(TensorError::Length {
                left: tz.shape()[0],
                right: targets.len(),
            });
        }
        let (t_len, v) = (tz.shape()[0], tz.shape()[1]);
        let mut masked = Vec::with_capacity(t_len);
        for &t in targets {
            if t == pad_id {
                masked.push(None);
            } else if t >= v {
                return Err(TensorError::Target { target: t, classes: v });
            } else {
                masked.push(Some(t));
            }
        }
        let count = masked.iter().flatten().count();
        if count == 0 {
            return Err(TensorError::DegenerateBatch);
        }
        let probs = kernels::softmax(tz.data(), t_len, v, 1);
        let mut total = 0.0f64;
        for (r, t) in masked.iter().enumerate() {
            if let Some(t) = t {
                let row = tz.row(r);
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
                let lse = max + row.iter().map(|&z| (z as f64 - max).exp()).sum::<f64>().ln();
                total += lse - row[*t] as f64;
            }
        }
        let loss = Tensor::scalar((total / count as f64) as f32);
        Ok(self.derived(
            loss,
            Op::CrossEntropy {
                logits,
                targets: masked,
                probs,
                count,
            },
            &[logits],
        ))
    }

    // ── Reverse pass ──────────────────────────────────────────────────

    /// Propagates `d loss / d node` to every tracked ancestor of `loss`.
    ///
    /// Node gradients remain readable through [`Graph::grad`]; gradients of
    /// parameter leaves are also returned by name.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut out = Gradients::default();
        for (node, g) in self.nodes.iter().zip(&grads) {
            if let (Some(name), Some(g)) = (node.param, g) {
                match out.grads.get_mut(name) {
                    Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    None => {
                        out.grads.insert(name.to_string(), g.clone());
                    }
                }
            }
        }
        self.grads = grads;
        Ok(out)
    }

    fn backprop_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if needs(*a) {
                    // dA = dC · Bᵀ
                    let da = kernels::matmul_nt(g, tb.data(), m, n, k);
                    add_into(&mut grads[a.0], &da);
                }
                if needs(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_tn_acc(&mut db, ta.data(), g, m, k, n);
                    add_into(&mut grads[b.0], &db);
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                if needs(*a) {
                    // dA = dC · B
                    let da = kernels::matmul(g, tb.data(), m, n, k);
                    add_into(&mut grads[a.0], &da);
                }
                if needs(*b) {
                    // dB = dCᵀ · A
                    let mut db = vec![0.0; n * k];
                    kernels::matmul_tn_acc(&mut db, g, ta.data(), m, n, k);
                    add_into(&mut grads[b.0], &db);
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if needs(*b) {
                    add_into(&mut grads[b.0], g);
                }
            }
            Op::AddRow(a, b) => {
                if needs(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if needs(*b) {
                    let n = val(*b).numel();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    add_into(&mut grads[b.0], &db);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let da: Vec<f32> = g.iter().zip(val(*b).data()).map(|(g, y)| g * y).collect();
                    add_into(&mut grads[a.0], &da);
                }
                if needs(*b) {
                    let db: Vec<f32> = g.iter().zip(val(*a).data()).map(|(g, x)| g * x).collect();
                    add_into(&mut grads[b.0], &db);
                }
            }
            Op::Scale(a, s) => {
                let da: Vec<f32> = g.iter().map(|g| g * s).collect();
                add_into(&mut grads[a.0], &da);
            }
            Op::Gelu(a) => {
                let da: Vec<f32> = g
                    .iter()
                    .zip(val(*a).data())
                    .map(|(g, &x)| g * kernels::gelu_grad(x))
                    .collect();
                add_into(&mut grads[a.0], &da);
            }
            Op::Softmax { x, outer, n, inner } => {
                let y = self.nodes[i].value.data();
                let mut dx = vec![0.0f32; y.len()];
                for o in 0..*outer {
                    for c in 0..*inner {
                        let idx = |j: usize| (o * n + j) * inner + c;
                        let s: f32 = (0..*n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..*n {
                            dx[idx(j)] = y[idx(j)] * (g[idx(j)] - s);
                        }
                    }
                }
                add_into(&mut grads[x.0], &dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = val(*gamma).numel();
                let gm = val(*gamma).data();
                if needs(*x) {
                    let mut dx = vec![0.0f32; xhat.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let range = r * d..(r + 1) * d;
                        let (gr, hr) = (&g[range.clone()], &xhat[range.clone()]);
                        let dh: Vec<f32> = gr.iter().zip(gm).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f32>() / d as f32;
                        let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f32>() / d as f32;
                        for j in 0..d {
                            dx[r * d + j] = rs * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                }
                if needs(*gamma) {
                    let mut dg = vec![0.0f32; d];
                    for (row_g, row_h) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += row_g[j] * row_h[j];
                        }
                    }
                    add_into(&mut grads[gamma.0], &dg);
                }
                if needs(*beta) {
                    let mut db = vec![0.0f32; d];
                    for row_g in g.chunks(d) {
                        db.iter_mut().zip(row_g).for_each(|(a, b)| *a += b);
                    }
                    add_into(&mut grads[beta.0], &db);
                }
            }
            Op::Embedding { table, ids } => {
                let tt = val(*table);
                let d = tt.shape()[1];
                let mut dt = vec![0.0f32; tt.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut dt[id * d..(id + 1) * d];
                    dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, b)| *a += b);
                }
                add_into(&mut grads[table.0], &dt);
            }
            Op::SliceCols { x, start } => {
                let tx = val(*x);
                let (rows, cols) = (tx.shape()[0], tx.shape()[1]);
                let len = g.len() / rows;
                let mut dx = vec![0.0f32; rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                add_into(&mut grads[x.0], &dx);
            }
            Op::ConcatCols(parts) => {
                let rows = self.nodes[i].value.shape()[0];
                let total = self.nodes[i].value.shape()[1];
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).shape()[1];
                    if needs(*p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        add_into(&mut grads[p.0], &dp);
                    }
                    offset += w;
                }
            }
            Op::Reshape(x) => add_into(&mut grads[x.0], g),
            Op::Sum(x) => {
                let dx = vec![g[0]; val(*x).numel()];
                add_into(&mut grads[x.0], &dx);
            }
            Op::Mean(x) => {
                let n = val(*x).numel();
                let dx = vec![g[0] / n as f32; n];
                add_into(&mut grads[x.0], &dx);
            }
            Op::Mask(x, mask) => {
                let dx: Vec<f32> = g.iter().zip(mask).map(|(g, m)| g * m).collect();
                add_into(&mut grads[x.0], &dx);
            }
            Op::Bce { logits, targets } => {
                let n = targets.len() as f32;
                let dz: Vec<f32> = val(*logits)
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&z, &t)| g[0] * (kernels::sigmoid(z) - t) / n)
                    .collect();
                add_into(&mut grads[logits.0], &dz);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let v = val(*logits).shape()[1];
                let scale = g[0] / *count as f32;
                let mut dz = vec![0.0f32; probs.len()];
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = t {
                        for j in 0..v {
                            dz[r * v + j] = probs[r * v + j] * scale;
                        }
                        dz[r * v + t] -= scale;
                    }
                }
                add_into(&mut grads[logits.0], &dz);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let i2 = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let m = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let c = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(c).data(), &[1., 2., 3., 4.]);

        let a = g.constant(t(&[1, 1], &[2.]));
        let b = g.constant(t(&[1, 1], &[3.]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[6.]);

        let x = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let y = g.constant(t(&[2, 2], &[5., 6., 7., 8.]));
        let c = g.matmul(x, y).unwrap();
        assert_eq!(g.value(c).data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]).unwrap());
        let b = g.constant(Tensor::zeros(&[2, 3]).unwrap());
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::Shape {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3] and [2, 3]"));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0., 0., 0.]));
        let y = g.softmax(x, 0).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let x = g.constant(t(&[2], &[0., std::f32::consts::LN_2]));
        let y = g.softmax(x, 0).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 1.0 / 3.0).abs() < 1e-6 && (d[1] - 2.0 / 3.0).abs() < 1e-6);
        let x = g.constant(t(&[2], &[1000., 1000.]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
        assert_eq!(g.softmax(x, 1).unwrap_err(), TensorError::Axis { axis: 1, rank: 1 });
    }

    #[test]
    fn softmax_along_first_axis() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[0., 5., 0., 5.]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let ones = g.constant(t(&[2], &[1., 1.]));
        let zeros = g.constant(t(&[2], &[0., 0.]));
        let x = g.constant(t(&[2], &[3., 3.]));
        let y = g.layer_norm(x, ones, zeros, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-6));

        let x = g.constant(t(&[2], &[1., -1.]));
        let y = g.layer_norm(x, ones, zeros, 1e-5).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-4 && (d[1] + 1.0).abs() < 1e-4);

        let x = g.constant(t(&[2], &[0., 2.]));
        let twos = g.constant(t(&[2], &[2., 2.]));
        let y = g.layer_norm(x, twos, ones, 1e-5).unwrap();
        let d = g.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-4 && (d[1] - 3.0).abs() < 1e-4);

        let bad = g.constant(t(&[3], &[1., 1., 1.]));
        assert!(g.layer_norm(x, bad, ones, 1e-5).is_err());
    }

    #[test]
    fn gelu_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0., 10., 1.]));
        let y = g.gelu(x);
        let d = g.value(y).data();
        assert_eq!(d[0], 0.0);
        assert!((d[1] - 10.0).abs() < 1e-5);
        // 1·Φ(1) = 0.841344746...
        assert!((d[2] - 0.841_344_7).abs() < 1e-6);
    }

    #[test]
    fn embedding_examples() {
        let mut g = Graph::new();
        let table = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let e = g.embedding(&[0], table).unwrap();
        assert_eq!(g.value(e).data(), &[1., 2.]);
        let e = g.embedding(&[1, 1], table).unwrap();
        assert_eq!(g.value(e).data(), &[3., 4., 3., 4.]);
        assert_eq!(g.embedding(&[2], table).unwrap_err(), TensorError::Vocab { id: 2, vocab: 2 });
    }

    #[test]
    fn bce_examples() {
        let mut g = Graph::new();
        let z = g.constant(t(&[1], &[0.]));
        let l = g.bce_with_logits(z, &[1.]).unwrap();
        assert!((g.value(l).item() - std::f32::consts::LN_2).abs() < 1e-6);
        let z = g.constant(t(&[1], &[50.]));
        let l = g.bce_with_logits(z, &[1.]).unwrap();
        assert!(g.value(l).item() < 1e-12);
        let z = g.constant(t(&[2], &[0., 0.]));
        let l = g.bce_with_logits(z, &[1., 0.]).unwrap();
        assert!((g.value(l).item() - std::f32::consts::LN_2).abs() < 1e-6);
        assert!(matches!(g.bce_with_logits(z, &[1.]), Err(TensorError::Length { .. })));
        assert_eq!(g.bce_with_logits(z, &[1., 0.5]).unwrap_err(), TensorError::NonBinaryTarget(0.5));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[1, 4]).unwrap());
        let l = g.cross_entropy(z, &[2], 0).unwrap();
        assert!((g.value(l).item() - 4f32.ln()).abs() < 1e-6);

        let z = g.constant(t(&[1, 3], &[0., 50., 0.]));
        let l = g.cross_entropy(z, &[1], 0).unwrap();
        assert!(g.value(l).item() < 1e-12);

        let z1 = g.constant(t(&[1, 3], &[0.3, -1., 2.]));
        let single = g.cross_entropy(z1, &[2], 0).unwrap();
        let z2 = g.constant(t(&[2, 3], &[0.3, -1., 2., 9., 9., 9.]));
        let padded = g.cross_entropy(z2, &[2, 0], 0).unwrap();
        assert_eq!(g.value(single).item(), g.value(padded).item());

        assert_eq!(g.cross_entropy(z2, &[0, 0], 0).unwrap_err(), TensorError::DegenerateBatch);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[1., 2., 3.]).with_requires_grad(true));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1., 1., 1.]);

        let mut g = Graph::new();
        let x = g.leaf(t(&[1], &[3.]).with_requires_grad(true));
        let xx = g.mul(x, x).unwrap();
        g.backward(xx).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.]);

        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1., 2.]).with_requires_grad(true));
        assert_eq!(g.backward(x).unwrap_err(), TensorError::NonScalarLoss(vec![2]));
    }

    #[test]
    fn no_grad_graph_tracks_nothing() {
        let mut g = Graph::no_grad();
        let x = g.leaf(t(&[1], &[3.]).with_requires_grad(true));
        let y = g.mul(x, x).unwrap();
        assert!(!g.requires_grad(y));
        g.backward(y).unwrap();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn dropout_zero_is_identity() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[1., 2.]));
        let n = g.len();
        assert_eq!(g.dropout(x, 0.0, &mut rng), x);
        assert_eq!(g.len(), n);
        let y = g.dropout(x, 0.5, &mut rng);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0 || v == 4.0));
    }
}
