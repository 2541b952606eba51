//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation eagerly: values are computed when the
//! op is pushed, and `backward` walks the tape in reverse. Parameters are
//! borrowed from a [`ParamStore`] rather than copied.

use std::collections::HashMap;
use std::ops::Deref;

use super::kernels::{self, AttnMask};
use super::params::{Grads, ParamId, ParamStore};
use super::tensor::{Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Val<'a, T> {
    Owned(Tensor<T>),
    Borrowed(&'a Tensor<T>),
}

impl<T> Deref for Val<'_, T> {
    type Target = Tensor<T>;
    fn deref(&self) -> &Tensor<T> {
        match self {
            Val::Owned(t) => t,
            Val::Borrowed(t) => t,
        }
    }
}

enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: AttnMask,
        probs: Vec<T>,
    },
    Gather(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
    KlDiv {
        student: Var,
        teacher_probs: Vec<T>,
        student_probs: Vec<T>,
    },
    WeightedSum(Vec<(Var, T)>),
}

struct Node<'a, T> {
    value: Val<'a, T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Computation tape over scalars of type `T`.
pub struct Graph<'a, T: Scalar = f32> {
    params: Option<&'a ParamStore<T>>,
    nodes: Vec<Node<'a, T>>,
    bound: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl<'a, T: Scalar> Graph<'a, T> {
    /// A tape that records gradients for parameters bound from `params`.
    pub fn new(params: &'a ParamStore<T>) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::new(),
            bound: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A tape that only computes values.
    pub fn inference(params: &'a ParamStore<T>) -> Self {
        Self {
            grad_enabled: false,
            ..Self::new(params)
        }
    }

    /// A parameter-free tape, handy for checking single ops.
    pub fn standalone() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            bound: HashMap::new(),
            grad_enabled: true,
        }
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

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let needs_grad = self.grad_enabled && inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value: Val::Owned(value),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Val::Owned(value),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant borrowed from outside the tape.
    pub fn constant_ref(&mut self, value: &'a Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Val::Borrowed(value),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input that is not a stored parameter.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Val::Owned(value),
            op: Op::Leaf,
            needs_grad: self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a parameter (memoized per tape).
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let store = self.params.expect("graph has no parameter store");
        self.nodes.push(Node {
            value: Val::Borrowed(store.get(id)),
            op: Op::Param,
            needs_grad: self.grad_enabled,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    /// Parameter value without gradient flow.
    pub fn param_detached(&mut self, id: ParamId) -> Var {
        let store = self.params.expect("graph has no parameter store");
        self.constant_ref(store.get(id))
    }

    /// Copy of `v` with gradient flow stopped.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        if k != k2 {
            return shape_err(format!("matmul [{m}×{k}]·[{k2}×{n}]"));
        }
        let out = kernels::matmul(m, k, n, self.value(a).data(), self.value(b).data());
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a);
        let (n, k2) = self.dims2(b);
        if k != k2 {
            return shape_err(format!("matmul_bt [{m}×{k}]·[{n}×{k2}]ᵀ"));
        }
        let out = kernels::matmul_bt(m, k, n, self.value(a).data(), self.value(b).data());
        self.push(
            Tensor::matrix(m, n, out)?,
            Op::MatMulBt(a, b),
            &[a, b],
            "matmul_bt",
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err(format!("add {:?} + {:?}", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(t, Op::Add(a, b), &[a, b], "add")
    }

    /// Adds a row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let c = ta.cols();
        if tr.len() != c {
            return shape_err(format!("add_row {:?} + {:?}", ta.shape(), tr.shape()));
        }
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (x, &b) in chunk.iter_mut().zip(tr.data()) {
                *x = *x + b;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(t, Op::AddRow(a, row), &[a, row], "add_row")
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| x * s).collect())?;
        self.push(t, Op::Scale(a, s), &[a], "scale")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|&x| kernels::gelu(x)).collect(),
        )?;
        self.push(t, Op::Gelu(a), &[a], "gelu")
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.len() != c || tb.len() != c {
            return shape_err(format!("layer_norm over {c} with gain {:?}", tg.shape()));
        }
        let (y, xhat, rstd) = kernels::layer_norm(tx.data(), c, tg.data(), tb.data(), eps);
        let t = Tensor::new(tx.shape().to_vec(), y)?;
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        };
        self.push(t, op, &[x, gain, bias], "layer_norm")
    }

    /// Multi-head attention of `q [P×d]` over `k`, `v [S×d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: AttnMask) -> Result<Var> {
        let (p, d) = self.dims2(q);
        let (s, dk) = self.dims2(k);
        let (s2, dv) = self.dims2(v);
        if d != dk || d != dv || s != s2 || heads == 0 || d % heads != 0 {
            return shape_err(format!(
                "attention q[{p}×{d}] k[{s}×{dk}] v[{s2}×{dv}] heads {heads}"
            ));
        }
        if mask.limits.len() != p || mask.key_span() > s {
            return shape_err(format!(
                "attention mask covers {} rows / {} keys for q[{p}] k[{s}]",
                mask.limits.len(),
                mask.key_span()
            ));
        }
        if (0..p).any(|r| mask.visible(r) == 0) {
            return shape_err("attention row with no visible keys");
        }
        let (out, probs) = kernels::attention(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            d,
            heads,
            &mask,
        );
        let t = Tensor::matrix(p, d, out)?;
        let op = Op::Attention {
            q,
            k,
            v,
            heads,
            mask,
            probs,
        };
        self.push(t, op, &[q, k, v], "attention")
    }

    /// Rows of `table` picked by `ids` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (n, c) = (tt.rows(), tt.cols());
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            if i >= n {
                return Err(Error::TokenRange { token: i, vocab: n });
            }
            data.extend_from_slice(tt.row(i));
        }
        let t = Tensor::matrix(ids.len(), c, data)?;
        self.push(t, Op::Gather(table, ids.to_vec()), &[table], "gather")
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let v = self.gather(a, rows)?;
        if let Op::Gather(src, idx) = std::mem::replace(&mut self.nodes[v.0].op, Op::Leaf) {
            self.nodes[v.0].op = Op::SelectRows(src, idx);
        }
        Ok(v)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let rows: Vec<usize> = (start..start + len).collect();
        self.select_rows(a, &rows)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = match parts.first() {
            Some(&p) => self.value(p).cols(),
            None => return shape_err("concat of nothing"),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return shape_err("concat_rows width mismatch");
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let t = Tensor::matrix(rows, c, data)?;
        self.push(t, Op::ConcatRows(parts.to_vec()), parts, "concat_rows")
    }

    /// Mean token-level cross-entropy over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let tl = self.value(logits);
        let (rows, vocab) = (tl.rows(), tl.cols());
        if targets.len() != rows {
            return shape_err(format!("{} targets for {rows} rows", targets.len()));
        }
        let mut probs = kernels::softmax(tl.data(), vocab);
        let mut loss = T::zero();
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= vocab {
                    return Err(Error::TokenRange { token: t, vocab });
                }
                let lp = kernels::log_softmax_row(tl.row(r));
                loss = loss - lp[t];
                count += 1;
            }
        }
        if count > 0 {
            loss = loss / T::from_usize(count).unwrap();
        }
        for (r, t) in targets.iter().enumerate() {
            if t.is_none() {
                probs[r * vocab..(r + 1) * vocab].fill(T::zero());
            }
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
            count,
        };
        self.push(Tensor::scalar(loss), op, &[logits], "cross_entropy")
    }

    /// Mean over rows of KL(softmax(teacher) ‖ softmax(student)).
    /// Gradient flows into the student only.
    pub fn kl_divergence(&mut self, teacher: Var, student: Var) -> Result<Var> {
        let (tp, tq) = (self.value(teacher), self.value(student));
        if tp.shape() != tq.shape() {
            return shape_err(format!("kl {:?} vs {:?}", tp.shape(), tq.shape()));
        }
        let (rows, vocab) = (tq.rows(), tq.cols());
        let mut loss = T::zero();
        for r in 0..rows {
            let lp = kernels::log_softmax_row(tp.row(r));
            let lq = kernels::log_softmax_row(tq.row(r));
            for c in 0..vocab {
                loss = loss + lp[c].exp() * (lp[c] - lq[c]);
            }
        }
        if rows > 0 {
            loss = loss / T::from_usize(rows).unwrap();
        }
        let op = Op::KlDiv {
            student,
            teacher_probs: kernels::softmax(tp.data(), vocab),
            student_probs: kernels::softmax(tq.data(), vocab),
        };
        self.push(Tensor::scalar(loss), op, &[student], "kl_divergence")
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut total = T::zero();
        for &(v, w) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return shape_err("weighted_sum expects scalars");
            }
            total = total + w * t.item();
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(
            Tensor::scalar(total),
            Op::WeightedSum(terms.to_vec()),
            &inputs,
            "weighted_sum",
        )
    }

    /// Reverse pass from a scalar `loss`. Returns per-node gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return shape_err(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![T::one()])?);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf | Op::Param) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = self.value(*b).cols();
                if self.needs(*a) {
                    let bv = self.value(*b).data();
                    let da = acc(grads, self, *a);
                    kernels::gemm_bt_acc(m, n, k, gd, bv, da);
                }
                if self.needs(*b) {
                    let av = self.value(*a).data();
                    let db = acc(grads, self, *b);
                    kernels::gemm_at_acc(m, k, n, av, gd, db);
                }
            }
            Op::MatMulBt(a, b) => {
                // c[m×n] = a[m×k]·b[n×k]ᵀ
                let (m, k) = self.dims2(*a);
                let n = self.value(*b).rows();
                if self.needs(*a) {
                    let bv = self.value(*b).data();
                    let da = acc(grads, self, *a);
                    kernels::gemm_acc(m, n, k, gd, bv, da);
                }
                if self.needs(*b) {
                    let av = self.value(*a).data();
                    let db = acc(grads, self, *b);
                    kernels::gemm_at_acc(m, n, k, gd, av, db);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        add_into(acc(grads, self, v), gd);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if self.needs(*a) {
                    add_into(acc(grads, self, *a), gd);
                }
                if self.needs(*row) {
                    let dr = acc(grads, self, *row);
                    let c = dr.len();
                    for chunk in gd.chunks(c) {
                        add_into(dr, chunk);
                    }
                }
            }
            Op::Scale(a, s) => {
                if self.needs(*a) {
                    for (d, &x) in acc(grads, self, *a).iter_mut().zip(gd) {
                        *d = *d + x * *s;
                    }
                }
            }
            Op::Gelu(a) => {
                if self.needs(*a) {
                    let xv = self.value(*a).data();
                    let da = acc(grads, self, *a);
                    for ((d, &x), &u) in da.iter_mut().zip(xv).zip(gd) {
                        *d = *d + u * kernels::gelu_grad(x);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = self.value(*x).cols();
                let n = T::from_usize(c).unwrap();
                if self.needs(*gain) {
                    let dg = acc(grads, self, *gain);
                    for (r, chunk) in gd.chunks(c).enumerate() {
                        for j in 0..c {
                            dg[j] = dg[j] + chunk[j] * xhat[r * c + j];
                        }
                    }
                }
                if self.needs(*bias) {
                    let db = acc(grads, self, *bias);
                    for chunk in gd.chunks(c) {
                        add_into(db, chunk);
                    }
                }
                if self.needs(*x) {
                    let gv = self.value(*gain).data().to_vec();
                    let dx = acc(grads, self, *x);
                    let mut dxhat = vec![T::zero(); c];
                    for (r, chunk) in gd.chunks(c).enumerate() {
                        let xh = &xhat[r * c..(r + 1) * c];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            dxhat[j] = chunk[j] * gv[j];
                            m1 = m1 + dxhat[j];
                            m2 = m2 + dxhat[j] * xh[j];
                        }
                        m1 = m1 / n;
                        m2 = m2 / n;
                        for j in 0..c {
                            let v = rstd[r] * (dxhat[j] - m1 - xh[j] * m2);
                            dx[r * c + j] = dx[r * c + j] + v;
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
            } => {
                let d = self.value(*q).cols();
                let mut dq = vec![T::zero(); self.value(*q).len()];
                let mut dk = vec![T::zero(); self.value(*k).len()];
                let mut dv = vec![T::zero(); self.value(*v).len()];
                kernels::attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    gd,
                    d,
                    *heads,
                    mask,
                    &mut dq,
                    &mut dk,
                    &mut dv,
                );
                for (var, dvals) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if self.needs(var) {
                        add_into(acc(grads, self, var), &dvals);
                    }
                }
            }
            Op::Gather(src, idx) | Op::SelectRows(src, idx) => {
                if self.needs(*src) {
                    let c = self.value(*src).cols();
                    let ds = acc(grads, self, *src);
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut ds[i * c..(i + 1) * c], &gd[r * c..(r + 1) * c]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.needs(p) {
                        add_into(acc(grads, self, p), &gd[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count > 0 && self.needs(*logits) {
                    let vocab = self.value(*logits).cols();
                    let s = gd[0] / T::from_usize(*count).unwrap();
                    let dl = acc(grads, self, *logits);
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            for c in 0..vocab {
                                let mut v = probs[r * vocab + c];
                                if c == t {
                                    v = v - T::one();
                                }
                                dl[r * vocab + c] = dl[r * vocab + c] + s * v;
                            }
                        }
                    }
                }
            }
            Op::KlDiv {
                student,
                teacher_probs,
                student_probs,
            } => {
                if self.needs(*student) {
                    let rows = self.value(*student).rows().max(1);
                    let s = gd[0] / T::from_usize(rows).unwrap();
                    let ds = acc(grads, self, *student);
                    for ((d, &q), &p) in ds.iter_mut().zip(student_probs).zip(teacher_probs) {
                        *d = *d + s * (q - p);
                    }
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if self.needs(v) {
                        let d = acc(grads, self, v);
                        d[0] = d[0] + w * gd[0];
                    }
                }
            }
        }
    }

    /// Adds the gradients of every bound parameter into `out`.
    pub fn accumulate_param_grads(&self, grads: &Gradients<T>, out: &mut Grads<T>) {
        for (&id, &v) in &self.bound {
            if let Some(g) = &grads.grads[v.0] {
                add_into(out.tensors[id.0].data_mut(), g.data());
            }
        }
    }
}

fn acc<'g, T: Scalar>(grads: &'g mut [Option<Tensor<T>>], g: &Graph<'_, T>, v: Var) -> &'g mut [T] {
    grads[v.0]
        .get_or_insert_with(|| Tensor::zeros(g.value(v).shape().to_vec()))
        .data_mut()
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Per-node gradients from [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}
