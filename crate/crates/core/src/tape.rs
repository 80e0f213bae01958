//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. Values are
//! computed eagerly; [`Tape::backward`] walks the record in reverse and
//! accumulates gradients for every node that depends on a leaf. The tape is
//! rebuilt for every pass.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::counter;
use crate::error::{Error, Result};
use crate::kernels::{self, sign0};
use crate::tensor::{c, ensure_same_shape, split_axis, Scalar, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.idx
    }
}

/// Backward rule for a unary node whose derivative is supplied by the caller
/// rather than derived from the forward computation.
pub trait GradRule<T: Scalar> {
    fn name(&self) -> &'static str;

    fn backward(&self, input: &Tensor<T>, output: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>>;
}

enum Op<T: Scalar> {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Neg(Var),
    Exp(Var),
    Relu(Var),
    SumAll(Var),
    SumAxis(Var, usize),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Tile(Var, usize),
    AddBias(Var, Var),
    AddMask(Var),
    Softmax(Var, T),
    L1Pairwise(Var, Var),
    SelectiveProject(Var, Var),
    SliceBlock(Var),
    SplitHeads(Var, usize),
    MergeHeads(Var, usize),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Embedding(Var, Vec<usize>),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Dropout(Var, Tensor<T>),
    Custom(Var, Box<dyn GradRule<T>>),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Scalar> {
    id: u64,
    nodes: Vec<Node<T>>,
    /// First node whose output is not finite (mask and constant nodes
    /// excepted); backward refuses to run past it.
    non_finite: Option<usize>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, or `None` if `v` does not
    /// reach the loss (or belongs to another tape).
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_ref())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), non_finite: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<&Node<T>> {
        if v.tape != self.id {
            return Err(Error::Provenance);
        }
        self.nodes.get(v.idx).ok_or(Error::Provenance)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.check(v).expect("var from another tape").value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.check(v)?.value)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        if self.non_finite.is_none() && !matches!(op, Op::AddMask(_) | Op::Constant) && !value.all_finite() {
            self.non_finite = Some(self.nodes.len());
        }
        self.nodes.push(Node { value, op, needs_grad });
        Var { tape: self.id, idx: self.nodes.len() - 1 }
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.idx].needs_grad)
    }

    /// Trainable input; gradients are accumulated for it.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Constant, false)
    }

    fn unary(&mut self, a: Var, value: Tensor<T>, op: Op<T>) -> Var {
        let ng = self.needs(&[a]);
        self.push(value, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor<T>, op: Op<T>) -> Var {
        let ng = self.needs(&[a, b]);
        self.push(value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.check(a)?.value.zip_map(&self.check(b)?.value, "add", |x, y| x + y)?;
        counter::charge(out.len(), 0);
        Ok(self.binary(a, b, out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.check(a)?.value.zip_map(&self.check(b)?.value, "sub", |x, y| x - y)?;
        counter::charge(out.len(), 0);
        Ok(self.binary(a, b, out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.check(a)?.value.zip_map(&self.check(b)?.value, "mul", |x, y| x * y)?;
        counter::charge(0, out.len());
        Ok(self.binary(a, b, out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.check(a)?.value.map(|x| x * s);
        counter::charge(0, out.len());
        Ok(self.unary(a, out, Op::Scale(a, s)))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let out = self.check(a)?.value.map(|x| -x);
        Ok(self.unary(a, out, Op::Neg(a)))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.check(a)?.value.map(|x| x.exp());
        Ok(self.unary(a, out, Op::Exp(a)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.check(a)?.value.map(|x| x.max(T::zero()));
        Ok(self.unary(a, out, Op::Relu(a)))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let x = &self.check(a)?.value;
        counter::charge(x.len(), 0);
        let out = Tensor::scalar(x.sum());
        Ok(self.unary(a, out, Op::SumAll(a)))
    }

    /// Sum over `axis`; the axis is removed from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = &self.check(a)?.value;
        if axis >= x.rank() {
            return Err(Error::Shape(format!("axis {axis} out of range for {:?}", x.shape())));
        }
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        let d = x.data();
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        counter::charge(x.len(), 0);
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.unary(a, Tensor::from_parts(shape, out), Op::SumAxis(a, axis)))
    }

    /// `a[..., k] · b[k, n]`; leading axes of `a` are treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.check(a)?.value, &self.check(b)?.value);
        if bv.rank() != 2 || av.last_dim() != bv.shape()[0] {
            return Err(Error::Dimension {
                op: "matmul".into(),
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.outer_len(), bv.shape()[0], bv.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(av.data(), bv.data(), m, k, n, &mut out);
        counter::charge(m * k * n, m * k * n);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        Ok(self.binary(a, b, Tensor::from_parts(shape, out), Op::MatMul(a, b)))
    }

    /// Batched product `a[B, m, k] · b[B, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.check(a)?.value, &self.check(b)?.value);
        let ok = av.rank() == 3 && bv.rank() == 3 && av.shape()[0] == bv.shape()[0] && av.shape()[2] == bv.shape()[1];
        if !ok {
            return Err(Error::Dimension { op: "bmm".into(), left: av.shape().to_vec(), right: bv.shape().to_vec() });
        }
        let (bs, m, k, n) = (av.shape()[0], av.shape()[1], av.shape()[2], bv.shape()[2]);
        let mut out = vec![T::zero(); bs * m * n];
        for i in 0..bs {
            kernels::matmul(
                &av.data()[i * m * k..(i + 1) * m * k],
                &bv.data()[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        counter::charge(bs * m * k * n, bs * m * k * n);
        Ok(self.binary(a, b, Tensor::from_parts(vec![bs, m, n], out), Op::BatchMatMul(a, b)))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = &self.check(a)?.value;
        if x.rank() < 2 {
            return Err(Error::Shape(format!("transpose needs rank >= 2, got {:?}", x.shape())));
        }
        let out = transpose_last2(x);
        Ok(self.unary(a, out, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.check(a)?.value.reshaped(shape.to_vec())?;
        Ok(self.unary(a, out, Op::Reshape(a)))
    }

    /// Stacks `n` copies of `a` along a new leading axis.
    pub fn tile(&mut self, a: Var, n: usize) -> Result<Var> {
        let x = &self.check(a)?.value;
        if n == 0 {
            return Err(Error::Shape("tile count must be positive".into()));
        }
        let mut shape = vec![n];
        shape.extend_from_slice(x.shape());
        let data = x.data().iter().copied().cycle().take(n * x.len()).collect();
        Ok(self.unary(a, Tensor::from_parts(shape, data), Op::Tile(a, n)))
    }

    /// Adds `b` to every trailing block of `a`; `b`'s shape must equal the
    /// trailing axes of `a`.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.check(a)?.value, &self.check(b)?.value);
        if av.rank() < bv.rank() || av.shape()[av.rank() - bv.rank()..] != *bv.shape() {
            return Err(Error::Dimension { op: "add_bias".into(), left: av.shape().to_vec(), right: bv.shape().to_vec() });
        }
        let n = bv.len();
        let data = av.data().iter().enumerate().map(|(i, &x)| x + bv.data()[i % n]).collect();
        counter::charge(av.len(), 0);
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        Ok(self.binary(a, b, out, Op::AddBias(a, b)))
    }

    /// Additive mask (entries 0 or -inf) applied to every trailing
    /// `[rows, cols]` block of `a`.
    pub fn add_mask(&mut self, a: Var, mask: &Tensor<T>) -> Result<Var> {
        let av = &self.check(a)?.value;
        if av.rank() < mask.rank() || av.shape()[av.rank() - mask.rank()..] != *mask.shape() {
            return Err(Error::Dimension { op: "add_mask".into(), left: av.shape().to_vec(), right: mask.shape().to_vec() });
        }
        let n = mask.len();
        let data = av.data().iter().enumerate().map(|(i, &x)| x + mask.data()[i % n]).collect();
        counter::charge(av.len(), 0);
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        Ok(self.unary(a, out, Op::AddMask(a)))
    }

    /// Softmax over the last axis of `scale · a`. `scale` must be positive so
    /// masked `-inf` entries stay `-inf` and map to exactly zero.
    pub fn softmax_rows(&mut self, a: Var, scale: T) -> Result<Var> {
        if !(scale > T::zero()) || !scale.is_finite() {
            return Err(Error::Domain(format!("softmax scale must be positive and finite, got {scale}")));
        }
        let out = softmax_rows_value(&self.check(a)?.value, scale)?;
        Ok(self.unary(a, out, Op::Softmax(a, scale)))
    }

    /// `out[.., i, j] = Σ_c |q[.., i, c] − k[.., j, c]|`.
    pub fn l1_pairwise(&mut self, q: Var, k: Var) -> Result<Var> {
        let (qv, kv) = (&self.check(q)?.value, &self.check(k)?.value);
        let (bs, l1, l2, d) = pairwise_dims("l1_pairwise", qv, kv)?;
        let (qd, kd) = (qv.data(), kv.data());
        let mut out = Vec::with_capacity(bs * l1 * l2);
        for b in 0..bs {
            for i in 0..l1 {
                let qr = &qd[(b * l1 + i) * d..(b * l1 + i + 1) * d];
                for j in 0..l2 {
                    let kr = &kd[(b * l2 + j) * d..(b * l2 + j + 1) * d];
                    let mut acc = T::zero();
                    for (&x, &y) in qr.iter().zip(kr) {
                        acc += (x - y).abs();
                    }
                    out.push(acc);
                }
            }
        }
        counter::charge(bs * l1 * l2 * d, 0);
        let mut shape = qv.shape().to_vec();
        *shape.last_mut().unwrap() = l2;
        Ok(self.binary(q, k, Tensor::from_parts(shape, out), Op::L1Pairwise(q, k)))
    }

    /// Sums the rows of `w[d, n]` selected by each row of the binary mask
    /// `x[..., d]`, in ascending column order. Uses no multiplications.
    pub fn selective_project(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (&self.check(x)?.value, &self.check(w)?.value);
        if wv.rank() != 2 || xv.last_dim() != wv.shape()[0] {
            return Err(Error::Dimension {
                op: "selective_project".into(),
                left: xv.shape().to_vec(),
                right: wv.shape().to_vec(),
            });
        }
        if let Some((index, &value)) = xv.data().iter().enumerate().find(|(_, &v)| v != T::zero() && v != T::one()) {
            return Err(Error::NonBinary { index, value: value.to_f64_lossy() });
        }
        let (rows, d, n) = (xv.outer_len(), wv.shape()[0], wv.shape()[1]);
        let mut out = vec![T::zero(); rows * n];
        let mut selected = 0usize;
        for t in 0..rows {
            let mask = &xv.data()[t * d..(t + 1) * d];
            let orow = &mut out[t * n..(t + 1) * n];
            for (j, _) in mask.iter().enumerate().filter(|(_, &m)| m == T::one()) {
                selected += 1;
                for (o, &wv) in orow.iter_mut().zip(&wv.data()[j * n..(j + 1) * n]) {
                    *o += wv;
                }
            }
        }
        counter::charge_selections(selected * n);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        Ok(self.binary(x, w, Tensor::from_parts(shape, out), Op::SelectiveProject(x, w)))
    }

    /// Top-left `[rows, cols]` block of the last two axes.
    pub fn slice_block(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let x = &self.check(a)?.value;
        if x.rank() < 2 {
            return Err(Error::Shape(format!("slice_block needs rank >= 2, got {:?}", x.shape())));
        }
        let r = x.rank();
        let (m, n) = (x.shape()[r - 2], x.shape()[r - 1]);
        if rows > m || cols > n {
            return Err(Error::Capacity { len: rows.max(cols), max_len: if rows > m { m } else { n } });
        }
        let outer = x.len() / (m * n);
        let mut data = Vec::with_capacity(outer * rows * cols);
        for o in 0..outer {
            for i in 0..rows {
                let base = o * m * n + i * n;
                data.extend_from_slice(&x.data()[base..base + cols]);
            }
        }
        let mut shape = x.shape().to_vec();
        shape[r - 2] = rows;
        shape[r - 1] = cols;
        Ok(self.unary(a, Tensor::from_parts(shape, data), Op::SliceBlock(a)))
    }

    /// `[B, L, d] → [B·h, L, d/h]`, head-major.
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let x = &self.check(a)?.value;
        if x.rank() != 3 {
            return Err(Error::Shape(format!("split_heads expects [B, L, d], got {:?}", x.shape())));
        }
        let (bs, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Divisibility { d, heads });
        }
        let out = if heads == 1 { x.clone() } else { permute_heads(x, bs, l, heads, d / heads, true) };
        let out = out.reshaped(vec![bs * heads, l, d / heads])?;
        Ok(self.unary(a, out, Op::SplitHeads(a, heads)))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let x = &self.check(a)?.value;
        if x.rank() != 3 || heads == 0 || x.shape()[0] % heads != 0 {
            return Err(Error::Shape(format!("merge_heads: {:?} with {heads} heads", x.shape())));
        }
        let (bs, l, dh) = (x.shape()[0] / heads, x.shape()[1], x.shape()[2]);
        let out = if heads == 1 { x.clone() } else { permute_heads(x, bs, l, heads, dh, false) };
        let out = out.reshaped(vec![bs, l, dh * heads])?;
        Ok(self.unary(a, out, Op::MergeHeads(a, heads)))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (xv, gv, bv) = (&self.check(x)?.value, &self.check(gamma)?.value, &self.check(beta)?.value);
        let n = xv.last_dim();
        if gv.shape() != [n] || bv.shape() != [n] {
            return Err(Error::Dimension { op: "layer_norm".into(), left: xv.shape().to_vec(), right: gv.shape().to_vec() });
        }
        let rows = xv.outer_len();
        let nf: T = c(n as f64);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * n..(r + 1) * n];
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / nf;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let ng = self.needs(&[x, gamma, beta]);
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng))
    }

    /// Gathers rows of `table[V, d]`; output shape is `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = &self.check(table)?.value;
        if tv.rank() != 2 {
            return Err(Error::Shape(format!("embedding table must be 2-D, got {:?}", tv.shape())));
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Domain(format!("token id {bad} out of range for vocabulary of {v}")));
        }
        if ids.is_empty() {
            return Err(Error::DegenerateInput("empty id list".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(tv.row(i));
        }
        let out = Tensor::from_parts(vec![ids.len(), d], data);
        Ok(self.unary(table, out, Op::Embedding(table, ids.to_vec())))
    }

    /// Mean cross-entropy of `logits[N, V]` against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = &self.check(logits)?.value;
        let v = lv.last_dim();
        let n = lv.outer_len();
        if targets.len() != n {
            return Err(Error::Dimension { op: "cross_entropy".into(), left: lv.shape().to_vec(), right: vec![targets.len()] });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Domain(format!("target {bad} out of range for {v} classes")));
        }
        let probs = softmax_rows_value(lv, T::one())?.into_data();
        let mut loss = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            loss -= probs[r * v + t].max(T::min_positive_value()).ln();
        }
        loss /= c(n as f64);
        let out = Tensor::scalar(loss);
        Ok(self.unary(logits, out, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }))
    }

    /// Multiplies by a fixed mask (already scaled by `1/(1-p)`).
    pub fn dropout(&mut self, a: Var, mask: Tensor<T>) -> Result<Var> {
        let out = self.check(a)?.value.zip_map(&mask, "dropout", |x, m| x * m)?;
        counter::charge(0, out.len());
        Ok(self.unary(a, out, Op::Dropout(a, mask)))
    }

    /// Records a unary op whose forward value is `output` and whose backward
    /// pass is delegated to `rule`.
    pub fn custom(&mut self, input: Var, output: Tensor<T>, rule: Box<dyn GradRule<T>>) -> Result<Var> {
        let x = &self.check(input)?.value;
        ensure_same_shape(rule.name(), x, &output)?;
        Ok(self.unary(input, output, Op::Custom(input, rule)))
    }

    /// Index of the first recorded node with a non-finite output.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.non_finite
    }

    /// Reverse-topological accumulation from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lnode = self.check(loss)?;
        if lnode.value.len() != 1 {
            return Err(Error::NonScalarLoss(lnode.value.shape().to_vec()));
        }
        if let Some(i) = self.non_finite.filter(|&i| i <= loss.idx) {
            return Err(Error::NonFinite(format!("backward (tape node {i} is not finite)")));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.idx] = Some(Tensor::ones(lnode.value.shape().to_vec()));

        for idx in (0..=loss.idx).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let contributions = self.node_backward(node, &g)?;
            grads[idx] = Some(g);
            for (v, dg) in contributions {
                if !self.nodes[v.idx].needs_grad {
                    continue;
                }
                debug_assert_eq!(dg.shape(), self.nodes[v.idx].value.shape());
                match &mut grads[v.idx] {
                    Some(acc) => acc.data_mut().iter_mut().zip(dg.data()).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(dg),
                }
            }
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.idx].value
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.idx].needs_grad
    }

    fn node_backward(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let shape_of = |v: Var| self.val(v).shape().to_vec();
        let out = match &node.op {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => {
                let ga = g.zip_map(self.val(*b), "mul", |x, y| x * y)?;
                let gb = g.zip_map(self.val(*a), "mul", |x, y| x * y)?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, s) => vec![(*a, g.map(|x| x * *s))],
            Op::Neg(a) => vec![(*a, g.map(|x| -x))],
            Op::Exp(a) => vec![(*a, g.zip_map(&node.value, "exp", |x, y| x * y)?)],
            Op::Relu(a) => vec![(*a, g.zip_map(self.val(*a), "relu", |x, y| if y > T::zero() { x } else { T::zero() })?)],
            Op::SumAll(a) => vec![(*a, Tensor::full(shape_of(*a), g.data()[0]))],
            Op::SumAxis(a, axis) => {
                let s = shape_of(*a);
                let (outer, n, inner) = split_axis(&s, *axis);
                let mut d = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            d[(o * n + k) * inner + i] = g.data()[o * inner + i];
                        }
                    }
                }
                vec![(*a, Tensor::from_parts(s, d))]
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k, n) = (av.outer_len(), bv.shape()[0], bv.shape()[1]);
                let mut res = Vec::new();
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    kernels::matmul_nt_acc(g.data(), bv.data(), m, n, k, &mut ga);
                    res.push((*a, Tensor::from_parts(av.shape().to_vec(), ga)));
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    kernels::matmul_tn_acc(av.data(), g.data(), m, k, n, &mut gb);
                    res.push((*b, Tensor::from_parts(bv.shape().to_vec(), gb)));
                }
                res
            }
            Op::BatchMatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (bs, m, k, n) = (av.shape()[0], av.shape()[1], av.shape()[2], bv.shape()[2]);
                let mut ga = vec![T::zero(); bs * m * k];
                let mut gb = vec![T::zero(); bs * k * n];
                for i in 0..bs {
                    let gs = &g.data()[i * m * n..(i + 1) * m * n];
                    let asl = &av.data()[i * m * k..(i + 1) * m * k];
                    let bsl = &bv.data()[i * k * n..(i + 1) * k * n];
                    kernels::matmul_nt_acc(gs, bsl, m, n, k, &mut ga[i * m * k..(i + 1) * m * k]);
                    kernels::matmul_tn_acc(asl, gs, m, k, n, &mut gb[i * k * n..(i + 1) * k * n]);
                }
                vec![
                    (*a, Tensor::from_parts(av.shape().to_vec(), ga)),
                    (*b, Tensor::from_parts(bv.shape().to_vec(), gb)),
                ]
            }
            Op::Transpose(a) => vec![(*a, transpose_last2(g))],
            Op::Reshape(a) => vec![(*a, g.reshaped(shape_of(*a))?)],
            Op::Tile(a, n) => {
                let s = shape_of(*a);
                let len: usize = s.iter().product();
                let mut d = vec![T::zero(); len];
                for r in 0..*n {
                    for (acc, &v) in d.iter_mut().zip(&g.data()[r * len..(r + 1) * len]) {
                        *acc += v;
                    }
                }
                vec![(*a, Tensor::from_parts(s, d))]
            }
            Op::AddBias(a, b) => {
                let s = shape_of(*b);
                let n: usize = s.iter().product();
                let mut d = vec![T::zero(); n];
                for (i, &v) in g.data().iter().enumerate() {
                    d[i % n] += v;
                }
                vec![(*a, g.clone()), (*b, Tensor::from_parts(s, d))]
            }
            Op::AddMask(a) => vec![(*a, g.clone())],
            Op::Softmax(a, scale) => {
                let y = &node.value;
                let n = y.last_dim();
                let mut d = vec![T::zero(); y.len()];
                for r in 0..y.outer_len() {
                    let yr = &y.data()[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let dot = yr.iter().zip(gr).fold(T::zero(), |acc, (&p, &q)| acc + p * q);
                    for j in 0..n {
                        d[r * n + j] = *scale * yr[j] * (gr[j] - dot);
                    }
                }
                vec![(*a, Tensor::from_parts(y.shape().to_vec(), d))]
            }
            Op::L1Pairwise(q, k) => {
                let (qv, kv) = (self.val(*q), self.val(*k));
                let (bs, l1, l2, d) = pairwise_dims("l1_pairwise", qv, kv)?;
                let mut gq = vec![T::zero(); qv.len()];
                let mut gk = vec![T::zero(); kv.len()];
                for b in 0..bs {
                    for i in 0..l1 {
                        let qo = (b * l1 + i) * d;
                        for j in 0..l2 {
                            let w = g.data()[(b * l1 + i) * l2 + j];
                            if w == T::zero() {
                                continue;
                            }
                            let ko = (b * l2 + j) * d;
                            for ch in 0..d {
                                let s = sign0(qv.data()[qo + ch] - kv.data()[ko + ch]) * w;
                                gq[qo + ch] += s;
                                gk[ko + ch] -= s;
                            }
                        }
                    }
                }
                vec![
                    (*q, Tensor::from_parts(qv.shape().to_vec(), gq)),
                    (*k, Tensor::from_parts(kv.shape().to_vec(), gk)),
                ]
            }
            Op::SelectiveProject(x, w) => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let (rows, d, n) = (xv.outer_len(), wv.shape()[0], wv.shape()[1]);
                let mut res = Vec::new();
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); rows * d];
                    kernels::matmul_nt_acc(g.data(), wv.data(), rows, n, d, &mut gx);
                    res.push((*x, Tensor::from_parts(xv.shape().to_vec(), gx)));
                }
                if self.wants(*w) {
                    let mut gw = vec![T::zero(); d * n];
                    for t in 0..rows {
                        let gr = &g.data()[t * n..(t + 1) * n];
                        for j in 0..d {
                            if xv.data()[t * d + j] == T::one() {
                                for (o, &v) in gw[j * n..(j + 1) * n].iter_mut().zip(gr) {
                                    *o += v;
                                }
                            }
                        }
                    }
                    res.push((*w, Tensor::from_parts(wv.shape().to_vec(), gw)));
                }
                res
            }
            Op::SliceBlock(a) => {
                let s = shape_of(*a);
                let r = s.len();
                let (m, n) = (s[r - 2], s[r - 1]);
                let (rows, cols) = (g.shape()[r - 2], g.shape()[r - 1]);
                let outer = g.len() / (rows * cols);
                let mut d = vec![T::zero(); outer * m * n];
                for o in 0..outer {
                    for i in 0..rows {
                        let src = &g.data()[(o * rows + i) * cols..(o * rows + i + 1) * cols];
                        d[o * m * n + i * n..o * m * n + i * n + cols].copy_from_slice(src);
                    }
                }
                vec![(*a, Tensor::from_parts(s, d))]
            }
            Op::SplitHeads(a, h) => {
                let s = shape_of(*a);
                let gd = if *h == 1 { g.clone() } else { permute_heads(g, s[0], s[1], *h, s[2] / h, false) };
                vec![(*a, gd.reshaped(s)?)]
            }
            Op::MergeHeads(a, h) => {
                let s = shape_of(*a);
                let gd = if *h == 1 { g.clone() } else { permute_heads(g, s[0] / h, s[1], *h, s[2], true) };
                vec![(*a, gd.reshaped(s)?)]
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gv = self.val(*gamma);
                let n = gv.len();
                let nf: T = c(n as f64);
                let rows = xhat.len() / n;
                let mut dx = vec![T::zero(); xhat.len()];
                let mut dgamma = vec![T::zero(); n];
                let mut dbeta = vec![T::zero(); n];
                let mut dxhat = vec![T::zero(); n];
                for r in 0..rows {
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let hr = &xhat[r * n..(r + 1) * n];
                    let mut sum_d = T::zero();
                    let mut sum_dh = T::zero();
                    for j in 0..n {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        dxhat[j] = gr[j] * gv.data()[j];
                        sum_d += dxhat[j];
                        sum_dh += dxhat[j] * hr[j];
                    }
                    for j in 0..n {
                        dx[r * n + j] = rstd[r] / nf * (nf * dxhat[j] - sum_d - hr[j] * sum_dh);
                    }
                }
                vec![
                    (*x, Tensor::from_parts(shape_of(*x), dx)),
                    (*gamma, Tensor::from_parts(vec![n], dgamma)),
                    (*beta, Tensor::from_parts(vec![n], dbeta)),
                ]
            }
            Op::Embedding(table, ids) => {
                let s = shape_of(*table);
                let d = s[1];
                let mut gt = vec![T::zero(); s[0] * d];
                for (r, &i) in ids.iter().enumerate() {
                    for (o, &v) in gt[i * d..(i + 1) * d].iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                        *o += v;
                    }
                }
                vec![(*table, Tensor::from_parts(s, gt))]
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let s = shape_of(*logits);
                let v = *s.last().unwrap();
                let scale = g.data()[0] / c(targets.len() as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * v + t] -= scale;
                }
                vec![(*logits, Tensor::from_parts(s, d))]
            }
            Op::Dropout(a, mask) => vec![(*a, g.zip_map(mask, "dropout", |x, m| x * m)?)],
            Op::Custom(a, rule) => vec![(*a, rule.backward(self.val(*a), &node.value, g)?)],
        };
        Ok(out)
    }
}

pub(crate) fn softmax_rows_value<T: Scalar>(x: &Tensor<T>, scale: T) -> Result<Tensor<T>> {
    let n = x.last_dim();
    let mut out = vec![T::zero(); x.len()];
    for r in 0..x.outer_len() {
        let row = &x.data()[r * n..(r + 1) * n];
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        if max == T::neg_infinity() {
            return Err(Error::DegenerateRow { row: r });
        }
        if !max.is_finite() {
            return Err(Error::NonFinite("softmax_rows".into()));
        }
        let orow = &mut out[r * n..(r + 1) * n];
        let mut sum = T::zero();
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = if v == T::neg_infinity() { T::zero() } else { (scale * (v - max)).exp() };
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

fn transpose_last2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let r = x.rank();
    let (m, n) = (x.shape()[r - 2], x.shape()[r - 1]);
    let outer = x.len() / (m * n);
    let mut d = vec![T::zero(); x.len()];
    for o in 0..outer {
        let base = o * m * n;
        for i in 0..m {
            for j in 0..n {
                d[base + j * m + i] = x.data()[base + i * n + j];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.swap(r - 2, r - 1);
    Tensor::from_parts(shape, d)
}

/// Moves between `[B, L, h, dh]` (`split = true` reads this layout) and
/// `[B, h, L, dh]`.
fn permute_heads<T: Scalar>(x: &Tensor<T>, bs: usize, l: usize, h: usize, dh: usize, split: bool) -> Tensor<T> {
    let mut d = vec![T::zero(); x.len()];
    for b in 0..bs {
        for t in 0..l {
            for hh in 0..h {
                let merged = ((b * l + t) * h + hh) * dh;
                let split_off = ((b * h + hh) * l + t) * dh;
                let (src, dst) = if split { (merged, split_off) } else { (split_off, merged) };
                d[dst..dst + dh].copy_from_slice(&x.data()[src..src + dh]);
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), d)
}

/// Validates `[.., l1, d]` against `[.., l2, d]` with equal leading axes and
/// returns (batch, l1, l2, d).
fn pairwise_dims<T: Scalar>(op: &str, q: &Tensor<T>, k: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    let bad = || Error::Dimension { op: op.into(), left: q.shape().to_vec(), right: k.shape().to_vec() };
    if q.rank() < 2 || q.rank() != k.rank() {
        return Err(bad());
    }
    let r = q.rank();
    if q.shape()[..r - 2] != k.shape()[..r - 2] || q.shape()[r - 1] != k.shape()[r - 1] {
        return Err(bad());
    }
    let bs = q.shape()[..r - 2].iter().product();
    Ok((bs, q.shape()[r - 2], k.shape()[r - 2], q.shape()[r - 1]))
}
