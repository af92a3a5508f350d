//! Reverse-mode automatic differentiation over a linear tape.

use std::collections::HashMap;

use crate::kernels::{self, Segment};
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into};
use crate::{Result, Scalar, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Handle to a tensor in a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable tensors, kept in insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Adds a tensor. Panics on a duplicate name.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of scalars.
    pub fn element_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Overwrites every tensor with the same-named tensor from `other`.
    /// Both sets must hold exactly the same names and shapes.
    pub fn assign_from(&mut self, other: &ParamSet<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(TensorError::Invalid(format!(
                "parameter count mismatch: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for (_, name, t) in other.iter() {
            let mine = self
                .id(name)
                .ok_or_else(|| TensorError::Invalid(format!("unexpected parameter {name}")))?;
            if self.get(mine).shape() != t.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "assign_from",
                    expected: self.get(mine).shape().to_vec(),
                    got: t.shape().to_vec(),
                });
            }
            self.tensors[mine.0] = t.clone();
        }
        Ok(())
    }
}

enum Value<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Scale(Var, T),
    MulMask(Var, Vec<T>),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
    },
    LinearCrossEntropy {
        h: Var,
        w: Var,
        b: Var,
        dh: Vec<T>,
        dw: Vec<T>,
        db: Vec<T>,
    },
    Gather {
        src: Var,
        index: Vec<Option<usize>>,
    },
    ReplaceRows {
        base: Var,
        rows: Vec<usize>,
        src: Var,
    },
    ConcatRows(Vec<Var>),
    Sum(Var),
    Attention {
        qkv: Var,
        heads: usize,
        segments: Vec<Segment>,
        probs: Vec<Vec<T>>,
    },
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations for one forward pass.
pub struct Tape<'p, T> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    frozen: Vec<bool>,
}

/// Gradients from [`Tape::backward`].
pub struct Gradients<T> {
    params: Vec<Option<Tensor<T>>>,
    vars: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a parameter, or `None` if it did not influence the loss
    /// (or was frozen).
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of a leaf created with `requires_grad`.
    pub fn var(&self, v: Var) -> Option<&Tensor<T>> {
        self.vars.get(v.0).and_then(Option::as_ref)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Global L2 norm over all parameter gradients.
    pub fn norm(&self) -> f64 {
        self.params
            .iter()
            .flatten()
            .flat_map(|t| t.data().iter())
            .map(|x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) {
    assert!(a == b, "{op}: shape mismatch {a:?} vs {b:?}");
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            frozen: vec![false; params.len()],
        }
    }

    /// A tape on which no parameter requires a gradient, so fused kernels
    /// skip their eager backward work.
    pub fn inference(params: &'p ParamSet<T>) -> Self {
        Tape {
            frozen: vec![true; params.len()],
            ..Tape::new(params)
        }
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }

    /// Excludes a parameter from differentiation. Must be called before the
    /// parameter is first used on this tape.
    pub fn freeze(&mut self, id: ParamId) {
        self.frozen[id.0] = true;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// An input whose gradient is reported by [`Gradients::var`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// The tape node for a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            requires_grad: !self.frozen[id.0],
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Parameter lookup by name. Panics if the name is unknown.
    pub fn param_named(&mut self, name: &str) -> Var {
        let id = self
            .params
            .id(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.param(id)
    }

    /// `a (m x k) * b (k x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        assert_eq!(bv.rows(), k, "matmul: inner dimensions differ");
        let mut out = Tensor::zeros(&[m, n]);
        matmul_into(m, k, n, av.data(), bv.data(), out.data_mut(), false);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `x W + b` with `x: n x i`, `W: i x o`, `b: o`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let (n, i, o) = (xv.rows(), xv.cols(), wv.cols());
        assert_eq!(wv.rows(), i, "linear: input width {i} vs weight rows {}", wv.rows());
        let mut out = Tensor::zeros(&[n, o]);
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.len(), o, "linear: bias length");
            for row in out.data_mut().chunks_mut(o) {
                row.copy_from_slice(bv.data());
            }
        }
        matmul_into(n, i, o, xv.data(), wv.data(), out.data_mut(), true);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out, Op::Linear { x, w, b }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("add", av.shape(), bv.shape());
        let mut out = av.clone();
        out.add_assign(bv);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x *= s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mul_mask(&mut self, a: Var, mask: Vec<T>) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(mask.len(), out.len(), "mul_mask: length");
        for (x, m) in out.data_mut().iter_mut().zip(&mask) {
            *x *= *m;
        }
        let rg = self.rg(a);
        self.push(out, Op::MulMask(a, mask), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x = kernels::gelu(*x));
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    /// Layer norm over columns with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        assert_eq!(self.value(gamma).len(), c, "layer_norm: gamma length");
        assert_eq!(self.value(beta).len(), c, "layer_norm: beta length");
        let (out, xhat, rstd) = kernels::layer_norm(xv.data(), c, self.value(gamma).data(), self.value(beta).data());
        let out = Tensor::from_vec(xv.shape(), out).expect("same length");
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c.max(1)) {
            kernels::softmax_row(row, None);
        }
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Mean cross-entropy of row-wise logits against class indices.
    /// An empty batch has loss zero.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        let (n, c) = (lv.rows(), lv.cols());
        assert_eq!(targets.len(), n, "cross_entropy: one target per row");
        let mut total = 0f64;
        for (row, &t) in lv.data().chunks(c.max(1)).zip(targets) {
            assert!(t < c, "cross_entropy: target {t} out of range {c}");
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut e: Vec<T> = row.iter().map(|x| *x - max).collect();
            let zt = e[t];
            e.iter_mut().for_each(|x| *x = x.exp());
            total += (crate::scalar::pairwise_sum(&e).ln() - zt).as_f64();
        }
        let loss = if n == 0 { 0.0 } else { total / n as f64 };
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(T::from_f64(loss)),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        )
    }

    /// `cross_entropy(linear(h, w, Some(b)), targets)` without materializing
    /// the logits; suited to very wide output layers.
    pub fn linear_cross_entropy(&mut self, h: Var, w: Var, b: Var, targets: &[usize]) -> Var {
        let (hv, wv, bv) = (self.value(h), self.value(w), self.value(b));
        let (n, d, v) = (hv.rows(), hv.cols(), wv.cols());
        assert_eq!(wv.rows(), d, "linear_cross_entropy: weight rows");
        let (want_dh, want_dw) = (self.rg(h), self.rg(w) || self.rg(b));
        let r = kernels::linear_cross_entropy(hv.data(), n, d, wv.data(), v, bv.data(), targets, want_dh, want_dw);
        let rg = want_dh || want_dw;
        self.push(
            Tensor::scalar(r.loss),
            Op::LinearCrossEntropy {
                h,
                w,
                b,
                dh: r.dh,
                dw: r.dw,
                db: r.db,
            },
            rg,
        )
    }

    /// Selects rows of `src`; `None` yields a row of zeros.
    pub fn gather_rows(&mut self, src: Var, index: Vec<Option<usize>>) -> Var {
        let sv = self.value(src);
        let (n, c) = (sv.rows(), sv.cols());
        let mut out = Tensor::zeros(&[index.len(), c]);
        for (i, ix) in index.iter().enumerate() {
            if let Some(r) = *ix {
                assert!(r < n, "gather_rows: index {r} out of range {n}");
                out.row_mut(i).copy_from_slice(sv.row(r));
            }
        }
        let rg = self.rg(src);
        self.push(out, Op::Gather { src, index }, rg)
    }

    /// Copy of `base` whose rows `rows[i]` are replaced by row `i` of `src`.
    /// Row indices must be distinct.
    pub fn replace_rows(&mut self, base: Var, rows: Vec<usize>, src: Var) -> Var {
        let mut out = self.value(base).clone();
        let sv = self.value(src);
        assert_eq!(sv.rows(), rows.len(), "replace_rows: one source row per target");
        assert_eq!(sv.cols(), out.cols(), "replace_rows: width");
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(r).copy_from_slice(sv.row(i));
        }
        let rg = self.rg(base) || self.rg(src);
        self.push(out, Op::ReplaceRows { base, rows, src }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: nothing to concatenate");
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut n = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), c, "concat_rows: width");
            n += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let out = Tensor::from_vec(&[n, c], data).expect("consistent length");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = crate::scalar::pairwise_sum(self.value(a).data());
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Multi-head self-attention on packed `q | k | v` rows. Rows attend
    /// only within their segment; keys with `key_mask[j] == false` are
    /// ignored, and a query with no visible key outputs zeros.
    pub fn attention(&mut self, qkv: Var, heads: usize, segments: Vec<Segment>, key_mask: Option<&[bool]>) -> Var {
        let qv = self.value(qkv);
        let n = qv.rows();
        assert_eq!(qv.cols() % 3, 0, "attention: width must be 3d");
        let d = qv.cols() / 3;
        if let Some(m) = key_mask {
            assert_eq!(m.len(), n, "attention: key mask length");
        }
        let f = kernels::attention_forward(qv.data(), n, d, heads, &segments, key_mask);
        let out = Tensor::from_vec(&[n, d], f.out).expect("n x d");
        let rg = self.rg(qkv);
        self.push(
            out,
            Op::Attention {
                qkv,
                heads,
                segments,
                probs: f.probs,
            },
            rg,
        )
    }

    /// Saved attention probabilities of an [`Tape::attention`] node: for
    /// segment `s` and head `h`, a row-major `len x len` matrix.
    pub fn attention_probs(&self, v: Var, segment: usize, head: usize) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { heads, probs, .. } => probs.get(segment * heads + head).map(Vec::as_slice),
            _ => None,
        }
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward: loss must be a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = Gradients {
            params: vec![None; self.params.len()],
            vars: vec![None; self.nodes.len()],
        };
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, node, g, &mut grads, &mut out);
        }
        out
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> Option<&'g mut Tensor<T>> {
        if !self.rg(v) {
            return None;
        }
        let shape = self.value(v).shape();
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)))
    }

    fn backward_node(&self, i: usize, node: &Node<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>], out: &mut Gradients<T>) {
        match &node.op {
            Op::Leaf => out.vars[i] = Some(g),
            Op::Param(id) => out.params[id.0] = Some(g),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if let Some(ga) = self.slot(grads, *a) {
                    matmul_nt_into(m, n, k, g.data(), bv.data(), ga.data_mut());
                }
                if let Some(gb) = self.slot(grads, *b) {
                    matmul_tn_into(k, m, n, av.data(), g.data(), gb.data_mut());
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, i, o) = (xv.rows(), xv.cols(), wv.cols());
                if let Some(gx) = self.slot(grads, *x) {
                    matmul_nt_into(n, o, i, g.data(), wv.data(), gx.data_mut());
                }
                if let Some(gw) = self.slot(grads, *w) {
                    matmul_tn_into(i, n, o, xv.data(), g.data(), gw.data_mut());
                }
                if let Some(b) = b {
                    if let Some(gb) = self.slot(grads, *b) {
                        for row in g.data().chunks(o.max(1)) {
                            for (acc, x) in gb.data_mut().iter_mut().zip(row) {
                                *acc += *x;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.add_assign(&g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.add_assign(&g);
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (acc, x) in ga.data_mut().iter_mut().zip(g.data()) {
                        *acc += *x * *s;
                    }
                }
            }
            Op::MulMask(a, mask) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((acc, x), m) in ga.data_mut().iter_mut().zip(g.data()).zip(mask) {
                        *acc += *x * *m;
                    }
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    for ((acc, x), gy) in ga.data_mut().iter_mut().zip(av.data()).zip(g.data()) {
                        *acc += *gy * kernels::gelu_grad(*x);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gv = self.value(*gamma);
                let c = gv.len();
                if let Some(gg) = self.slot(grads, *gamma) {
                    for (grow, xrow) in g.data().chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg.data_mut()[j] += grow[j] * xrow[j];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for grow in g.data().chunks(c) {
                        for j in 0..c {
                            gb.data_mut()[j] += grow[j];
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let cf = T::from_f64(c as f64);
                    let mut dxh = vec![T::zero(); c];
                    for (r, (grow, xrow)) in g.data().chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            dxh[j] = grow[j] * gv.data()[j];
                            m1 += dxh[j];
                            m2 += dxh[j] * xrow[j];
                        }
                        m1 /= cf;
                        m2 /= cf;
                        let dst = gx.row_mut(r);
                        for j in 0..c {
                            dst[j] += rstd[r] * (dxh[j] - m1 - xrow[j] * m2);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let y = self.nodes_value_of(node);
                let c = y.cols().max(1);
                if let Some(ga) = self.slot(grads, *a) {
                    for ((acc, yrow), grow) in ga.data_mut().chunks_mut(c).zip(y.data().chunks(c)).zip(g.data().chunks(c)) {
                        let dot: T = yrow.iter().zip(grow).map(|(p, q)| *p * *q).sum();
                        for j in 0..c {
                            acc[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let lv = self.value(*logits);
                let (n, c) = (lv.rows(), lv.cols());
                if n == 0 {
                    return;
                }
                let s = g.data()[0] / T::from_f64(n as f64);
                if let Some(gl) = self.slot(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        let mut p = lv.row(r).to_vec();
                        kernels::softmax_row(&mut p, None);
                        p[t] -= T::one();
                        let dst = gl.row_mut(r);
                        for j in 0..c {
                            dst[j] += p[j] * s;
                        }
                    }
                }
            }
            Op::LinearCrossEntropy { h, w, b, dh, dw, db } => {
                let s = g.data()[0];
                if let Some(gh) = self.slot(grads, *h) {
                    for (acc, x) in gh.data_mut().iter_mut().zip(dh) {
                        *acc += *x * s;
                    }
                }
                if let Some(gw) = self.slot(grads, *w) {
                    for (acc, x) in gw.data_mut().iter_mut().zip(dw) {
                        *acc += *x * s;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (acc, x) in gb.data_mut().iter_mut().zip(db) {
                        *acc += *x * s;
                    }
                }
            }
            Op::Gather { src, index } => {
                if let Some(gs) = self.slot(grads, *src) {
                    for (i, ix) in index.iter().enumerate() {
                        if let Some(r) = *ix {
                            for (acc, x) in gs.row_mut(r).iter_mut().zip(g.row(i)) {
                                *acc += *x;
                            }
                        }
                    }
                }
            }
            Op::ReplaceRows { base, rows, src } => {
                if let Some(gs) = self.slot(grads, *src) {
                    for (i, &r) in rows.iter().enumerate() {
                        for (acc, x) in gs.row_mut(i).iter_mut().zip(g.row(r)) {
                            *acc += *x;
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *base) {
                    let mut g = g;
                    for &r in rows {
                        g.row_mut(r).iter_mut().for_each(|x| *x = T::zero());
                    }
                    gb.add_assign(&g);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(gp) = self.slot(grads, p) {
                        for (acc, x) in gp.data_mut().iter_mut().zip(&g.data()[offset..offset + len]) {
                            *acc += *x;
                        }
                    }
                    offset += len;
                }
            }
            Op::Sum(a) => {
                let s = g.data()[0];
                if let Some(ga) = self.slot(grads, *a) {
                    ga.data_mut().iter_mut().for_each(|x| *x += s);
                }
            }
            Op::Attention { qkv, heads, segments, probs } => {
                let qv = self.value(*qkv);
                let (n, d) = (qv.rows(), qv.cols() / 3);
                if let Some(gq) = self.slot(grads, *qkv) {
                    kernels::attention_backward(qv.data(), g.data(), n, d, *heads, segments, probs, gq.data_mut());
                }
            }
        }
    }

    fn nodes_value_of<'a>(&'a self, node: &'a Node<T>) -> &'a Tensor<T> {
        match &node.value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }
}
