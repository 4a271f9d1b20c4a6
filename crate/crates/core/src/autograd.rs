//! Reverse-mode differentiation over a tape of coarse tensor operations.
//!
//! A [`Graph`] records each operation as it is evaluated. Parameters are bound
//! by name from a borrowed [`ParamStore`] without copying; [`Graph::backward`]
//! walks the tape in reverse and returns [`Gradients`], which the caller folds
//! into the store with [`ParamStore::accumulate`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{self, Scalar, Tensor};

pub type NodeId = usize;

/// Which keys each query row may attend to.
#[derive(Debug, Clone, PartialEq)]
pub enum AttnMask {
    /// Every key.
    Full,
    /// Row `i` sees keys `0..=i`.
    Causal,
    /// Only keys whose flag is true, for every row.
    Keys(Vec<bool>),
}

impl AttnMask {
    fn key_lists(&self, rows: usize, keys: usize) -> Result<Vec<Vec<usize>>> {
        let lists: Vec<Vec<usize>> = match self {
            AttnMask::Full => vec![(0..keys).collect(); rows],
            AttnMask::Causal => (0..rows).map(|i| (0..keys.min(i + 1)).collect()).collect(),
            AttnMask::Keys(valid) => {
                if valid.len() != keys {
                    return Err(Error::Shape(format!(
                        "key mask has {} entries for {keys} keys",
                        valid.len()
                    )));
                }
                let kept: Vec<usize> = (0..keys).filter(|&j| valid[j]).collect();
                vec![kept; rows]
            }
        };
        if let Some(row) = lists.iter().position(|l| l.is_empty()) {
            return Err(Error::DegenerateAttentionRow { row });
        }
        Ok(lists)
    }
}

enum Value<F> {
    Owned(Tensor<F>),
    Param(usize),
}

enum Op<F> {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Scale(NodeId, F),
    Sum(NodeId),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        mean: Vec<F>,
        rstd: Vec<F>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<u32>,
    },
    SliceRows {
        x: NodeId,
        start: usize,
    },
    ConcatRows(Vec<NodeId>),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        keys: Vec<Vec<usize>>,
        probs: Vec<F>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<u32>,
        probs: Vec<F>,
    },
}

struct Node<F> {
    value: Value<F>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Graph<'p, F: Scalar> {
    store: Option<&'p ParamStore<F>>,
    nodes: Vec<Node<F>>,
    bound: HashMap<usize, NodeId>,
}

impl<F: Scalar> Default for Graph<'_, F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, F: Scalar> Graph<'p, F> {
    /// A graph with no parameter store; use [`Graph::leaf`] for inputs.
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn with_params(store: &'p ParamStore<F>) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        match &self.nodes[id].value {
            Value::Owned(t) => t,
            Value::Param(i) => &self.store.expect("param node without store").entry(*i).value,
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.value(id).shape()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, id: NodeId) -> F {
        self.value(id).data()[0]
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        self.leaf(value, false)
    }

    /// Binds a named parameter; repeated calls return the same node.
    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        let store = self
            .store
            .ok_or_else(|| Error::Config("graph has no parameter store".into()))?;
        let idx = store
            .index_of(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
        if let Some(&id) = self.bound.get(&idx) {
            return Ok(id);
        }
        self.nodes.push(Node {
            value: Value::Param(idx),
            op: Op::Leaf,
            needs_grad: true,
        });
        let id = self.nodes.len() - 1;
        self.bound.insert(idx, id);
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        tensor::matmul_acc(self.value(a).data(), self.value(b).data(), out.data_mut(), m, k, n);
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!("add {:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += v;
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!("mul {:?} * {:?}", self.shape(a), self.shape(b))));
        }
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= v;
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// Adds `bias` (any shape with `cols(x)` elements) to every row of `x`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let cols = self.value(x).cols();
        if self.value(bias).len() != cols {
            return Err(Error::Shape(format!(
                "bias of {} elements for rows of {cols}",
                self.value(bias).len()
            )));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        for row in out.data_mut().chunks_exact_mut(cols) {
            for (o, &v) in row.iter_mut().zip(b) {
                *o += v;
            }
        }
        let ng = self.ng(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), ng))
    }

    pub fn scale(&mut self, x: NodeId, c: F) -> NodeId {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        let ng = self.ng(&[x]);
        self.push(out, Op::Scale(x, c), ng)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: F = self.value(x).data().iter().copied().sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let out = tensor::gelu(self.value(x));
        let ng = self.ng(&[x]);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let cols = xv.cols();
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(Error::Shape(format!("layer_norm gain/bias for width {cols}")));
        }
        let rows = xv.rows();
        let mut out = Tensor::zeros(xv.shape());
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let eps = F::of(tensor::LAYER_NORM_EPS);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        for r in 0..rows {
            let (m, s) = tensor::layer_norm_row(xv.row(r), g, b, eps, out.row_mut(r));
            mean.push(m);
            rstd.push(s);
        }
        let ng = self.ng(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            },
            ng,
        ))
    }

    pub fn embedding(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let t = self.value(table);
        let (v, d) = (t.rows(), t.cols());
        let mut out = Tensor::zeros(&[ids.len(), d]);
        for (r, &id) in ids.iter().enumerate() {
            if id as usize >= v {
                return Err(Error::TargetOutOfRange { id, vocab: v });
            }
            out.row_mut(r).copy_from_slice(t.row(id as usize));
        }
        let ng = self.ng(&[table]);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let t = self.value(x);
        if start + len > t.rows() {
            return Err(Error::Shape(format!(
                "rows {start}..{} of a {}-row tensor",
                start + len,
                t.rows()
            )));
        }
        let d = t.cols();
        let data = t.data()[start * d..(start + len) * d].to_vec();
        let out = Tensor::new(vec![len, d], data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::SliceRows { x, start }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let d = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != d {
                return Err(Error::Shape(format!("concat widths {d} and {}", t.cols())));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, d], data)?;
        let ng = self.ng(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Multi-head scaled dot-product attention. `q` is `[Tq, d]`, `k`/`v` are
    /// `[Tk, d]`; head `h` uses columns `h·d/heads .. (h+1)·d/heads`.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize, mask: &AttnMask) -> Result<NodeId> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (tq, d) = (qv.rows(), qv.cols());
        let tk = kv.rows();
        if kv.cols() != d || vv.cols() != d || vv.rows() != tk || d % heads != 0 {
            return Err(Error::Shape(format!(
                "attention q {:?} k {:?} v {:?} heads {heads}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        let keys = mask.key_lists(tq, tk)?;
        let mut out = Tensor::zeros(&[tq, d]);
        let mut probs = vec![F::zero(); heads * tq * tk];
        let mut scores = vec![F::zero(); tk];
        for h in 0..heads {
            for i in 0..tq {
                let p = &mut probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                attend_row(
                    qv.data(),
                    kv.data(),
                    vv.data(),
                    d,
                    heads,
                    h,
                    i,
                    &keys[i],
                    &mut scores,
                    p,
                    out.row_mut(i),
                );
            }
        }
        let ng = self.ng(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                keys,
                probs,
            },
            ng,
        ))
    }

    /// Attention weights `[heads, Tq, Tk]` recorded by an attention node.
    pub fn attention_probs(&self, id: NodeId) -> Option<(&[F], usize)> {
        match &self.nodes[id].op {
            Op::Attention { probs, heads, .. } => Some((probs, *heads)),
            _ => None,
        }
    }

    /// Mean cross-entropy of `logits [T, V]` against `targets`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[u32]) -> Result<NodeId> {
        let lv = self.value(logits);
        let (t, v) = (lv.rows(), lv.cols());
        if t != targets.len() {
            return Err(Error::Shape(format!("{t} logit rows for {} targets", targets.len())));
        }
        if t == 0 {
            return Err(Error::EmptySequence);
        }
        let mut probs = vec![F::zero(); t * v];
        let mut total = F::zero();
        for (r, &y) in targets.iter().enumerate() {
            if y as usize >= v {
                return Err(Error::TargetOutOfRange { id: y, vocab: v });
            }
            let row = lv.row(r);
            let lse = tensor::log_sum_exp(row);
            for (p, &x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
            total += lse - row[y as usize];
        }
        let loss = total / F::of(t as f64);
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Reverse pass from a scalar node, seeding `d loss = seed`.
    pub fn backward(&self, loss: NodeId, seed: F) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        if !self.value(loss).all_finite() {
            return Err(Error::NonFiniteLoss);
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(vec![seed]);

        for id in (0..=loss).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let g = match &self.nodes[id].op {
                Op::Leaf => continue,
                _ => match grads[id].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop_node(id, &g, &mut grads);
        }

        let params = self
            .bound
            .iter()
            .map(|(&pidx, &node)| (pidx, node))
            .collect();
        Ok(Gradients { by_node: grads, params })
    }

    fn backprop_node(&self, id: NodeId, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let needs = |n: NodeId| self.nodes[n].needs_grad;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if needs(*a) {
                    let da = slot(grads, *a, m * k);
                    tensor::matmul_bt_acc(g, self.value(*b).data(), da, m, k, n);
                }
                if needs(*b) {
                    let db = slot(grads, *b, k * n);
                    tensor::matmul_at_acc(self.value(*a).data(), g, db, m, k, n);
                }
            }
            Op::Add(a, b) => {
                for &x in [a, b] {
                    if needs(x) {
                        add_into(slot(grads, x, g.len()), g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let bv = self.value(*b).data();
                    let da = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        da[i] += g[i] * bv[i];
                    }
                }
                if needs(*b) {
                    let av = self.value(*a).data();
                    let db = slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        db[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddBias(x, b) => {
                if needs(*x) {
                    add_into(slot(grads, *x, g.len()), g);
                }
                if needs(*b) {
                    let cols = self.value(*b).len();
                    let db = slot(grads, *b, cols);
                    for row in g.chunks_exact(cols) {
                        add_into(db, row);
                    }
                }
            }
            Op::Scale(x, c) => {
                if needs(*x) {
                    let dx = slot(grads, *x, g.len());
                    for i in 0..g.len() {
                        dx[i] += *c * g[i];
                    }
                }
            }
            Op::Sum(x) => {
                if needs(*x) {
                    let n = self.value(*x).len();
                    slot(grads, *x, n).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Gelu(x) => {
                if needs(*x) {
                    let xv = self.value(*x).data();
                    let dx = slot(grads, *x, g.len());
                    for i in 0..g.len() {
                        dx[i] += g[i] * tensor::gelu_grad(xv[i]);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let xv = self.value(*x);
                let cols = xv.cols();
                let gv = self.value(*gain).data();
                let nf = F::of(cols as f64);
                let mut dgain = vec![F::zero(); cols];
                let mut dbias = vec![F::zero(); cols];
                let mut dx = vec![F::zero(); xv.len()];
                let mut xhat = vec![F::zero(); cols];
                let mut dxhat = vec![F::zero(); cols];
                for r in 0..xv.rows() {
                    let xr = xv.row(r);
                    let gr = &g[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        xhat[j] = (xr[j] - mean[r]) * rstd[r];
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                        dxhat[j] = gr[j] * gv[j];
                    }
                    let m1 = dxhat.iter().copied().sum::<F>() / nf;
                    let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<F>() / nf;
                    for j in 0..cols {
                        dx[r * cols + j] = rstd[r] * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                if needs(*x) {
                    add_into(slot(grads, *x, dx.len()), &dx);
                }
                if needs(*gain) {
                    add_into(slot(grads, *gain, cols), &dgain);
                }
                if needs(*bias) {
                    add_into(slot(grads, *bias, cols), &dbias);
                }
            }
            Op::Embedding { table, ids } => {
                if needs(*table) {
                    let t = self.value(*table);
                    let d = t.cols();
                    let dt = slot(grads, *table, t.len());
                    for (r, &id) in ids.iter().enumerate() {
                        let id = id as usize;
                        add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::SliceRows { x, start } => {
                if needs(*x) {
                    let t = self.value(*x);
                    let d = t.cols();
                    let dx = slot(grads, *x, t.len());
                    add_into(&mut dx[start * d..start * d + g.len()], g);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if needs(p) {
                        add_into(slot(grads, p, n), &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                keys,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, keys, probs, g, grads),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if needs(*logits) {
                    let v = self.value(*logits).cols();
                    let scale = g[0] / F::of(targets.len() as f64);
                    let dl = slot(grads, *logits, probs.len());
                    for (r, &y) in targets.iter().enumerate() {
                        for j in 0..v {
                            dl[r * v + j] += scale * probs[r * v + j];
                        }
                        dl[r * v + y as usize] -= scale;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        keys: &[Vec<usize>],
        probs: &[F],
        g: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let d = self.value(q).cols();
        let tq = self.value(q).rows();
        let tk = self.value(k).rows();
        let dh = d / heads;
        let scale = F::one() / F::of(dh as f64).sqrt();
        let mut dq = vec![F::zero(); tq * d];
        let mut dk = vec![F::zero(); tk * d];
        let mut dv = vec![F::zero(); tk * d];
        let mut dp = vec![F::zero(); tk];
        for h in 0..heads {
            let c0 = h * dh;
            for i in 0..tq {
                let p = &probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                let go = &g[i * d + c0..i * d + c0 + dh];
                let mut inner = F::zero();
                for &j in &keys[i] {
                    dp[j] = tensor::dot(go, &vv[j * d + c0..j * d + c0 + dh]);
                    inner += p[j] * dp[j];
                }
                let qi = &qv[i * d + c0..i * d + c0 + dh];
                for &j in &keys[i] {
                    let ds = p[j] * (dp[j] - inner) * scale;
                    tensor::axpy(ds, &kv[j * d + c0..j * d + c0 + dh], &mut dq[i * d + c0..i * d + c0 + dh]);
                    tensor::axpy(ds, qi, &mut dk[j * d + c0..j * d + c0 + dh]);
                    tensor::axpy(p[j], go, &mut dv[j * d + c0..j * d + c0 + dh]);
                }
            }
        }
        for (node, buf) in [(q, dq), (k, dk), (v, dv)] {
            if self.nodes[node].needs_grad {
                let n = buf.len();
                add_into(slot(grads, node, n), &buf);
            }
        }
    }
}

/// One attention output row for one head. Scores are written to `scratch`,
/// normalized weights to `probs` (entries outside `keys` stay zero) and the
/// weighted value sum is accumulated into the head's columns of `out`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend_row<F: Scalar>(
    q: &[F],
    k: &[F],
    v: &[F],
    d: usize,
    heads: usize,
    h: usize,
    i: usize,
    keys: &[usize],
    scratch: &mut [F],
    probs: &mut [F],
    out: &mut [F],
) {
    let dh = d / heads;
    let c0 = h * dh;
    let scale = F::one() / F::of(dh as f64).sqrt();
    let qi = &q[i * d + c0..i * d + c0 + dh];
    for &j in keys {
        scratch[j] = tensor::dot(qi, &k[j * d + c0..j * d + c0 + dh]) * scale;
    }
    tensor::softmax_indexed(scratch, keys, probs);
    let o = &mut out[c0..c0 + dh];
    for &j in keys {
        tensor::axpy(probs[j], &v[j * d + c0..j * d + c0 + dh], o);
    }
}

fn slot<F: Scalar>(grads: &mut [Option<Vec<F>>], id: NodeId, n: usize) -> &mut [F] {
    grads[id].get_or_insert_with(|| vec![F::zero(); n])
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Result of a backward pass.
pub struct Gradients<F> {
    by_node: Vec<Option<Vec<F>>>,
    params: Vec<(usize, NodeId)>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient w.r.t. a leaf node, if it received any.
    pub fn get(&self, node: NodeId) -> Option<&[F]> {
        self.by_node.get(node).and_then(|g| g.as_deref())
    }

    /// `(parameter index, gradient)` for each bound parameter that received one.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[F])> {
        self.params
            .iter()
            .filter_map(|&(p, n)| self.by_node[n].as_deref().map(|g| (p, g)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap(), true);
        let s = g.sum(w);
        let grads = g.backward(s, 1.0).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn sum_of_squares_gives_two_w() {
        let vals = [0.5, -1.5, 3.0];
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::from_f64(&[3], &vals).unwrap(), true);
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s, 1.0).unwrap();
        for (gv, v) in grads.get(w).unwrap().iter().zip(vals) {
            assert_eq!(*gv, 2.0 * v);
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f32>::new();
        let c = g.constant(Tensor::filled(&[2], 1.0));
        let w = g.leaf(Tensor::filled(&[2], 2.0), true);
        let p = g.mul(c, w).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s, 1.0).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(w).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn params_bind_once_and_accumulate() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap()).unwrap();
        let grads = {
            let mut g = Graph::with_params(&store);
            let a = g.param("w").unwrap();
            let b = g.param("w").unwrap();
            assert_eq!(a, b);
            let p = g.mul(a, b).unwrap();
            let s = g.sum(p);
            g.backward(s, 0.5).unwrap()
        };
        store.accumulate(&grads);
        store.accumulate(&grads);
        assert_eq!(store.grad("w").unwrap().data(), &[2.0, 4.0]);
        assert!(Graph::with_params(&store).param("missing").is_err());
    }

    #[test]
    fn masked_attention_ignores_dropped_keys() {
        let q = Tensor::<f64>::from_f64(&[1, 2], &[0.3, -0.2]).unwrap();
        let k = Tensor::<f64>::from_f64(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 5.0, 5.0]).unwrap();
        let v = Tensor::<f64>::from_f64(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 50.0, 60.0]).unwrap();
        let mut g = Graph::new();
        let (qn, kn, vn) = (g.constant(q), g.constant(k), g.constant(v));
        let out = g.attention(qn, kn, vn, 1, &AttnMask::Keys(vec![true, true, false])).unwrap();
        let (p, _) = g.attention_probs(out).unwrap();
        assert_eq!(p[2], 0.0);
        assert_relative_eq!(p[0] + p[1], 1.0, epsilon = 1e-15);
        let s0 = 0.3 / 2f64.sqrt();
        let s1 = -0.2 / 2f64.sqrt();
        let p0 = s0.exp() / (s0.exp() + s1.exp());
        assert_relative_eq!(p[0], p0, epsilon = 1e-14);
        assert_relative_eq!(g.value(out).data()[0], p0 * 1.0 + (1.0 - p0) * 3.0, epsilon = 1e-14);

        let err = g.attention(qn, kn, vn, 1, &AttnMask::Keys(vec![false; 3])).unwrap_err();
        assert!(matches!(err, Error::DegenerateAttentionRow { .. }));
    }

    #[test]
    fn causal_rows_see_prefix_only() {
        let lists = AttnMask::Causal.key_lists(3, 3).unwrap();
        assert_eq!(lists, vec![vec![0], vec![0, 1], vec![0, 1, 2]]);
    }
}
