//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only list of nodes. Each forward op appends a
//! node holding its value plus whatever it needs for the backward pass, so
//! inputs always precede their consumers and [`Graph::backward`] is a single
//! sweep in reverse append order. Gradients are carried in `f64` during the
//! sweep and rounded to `f32` only when handed back.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::kernels::{self, NormStats};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRowBias {
        x: NodeId,
        bias: NodeId,
    },
    MatMul(NodeId, NodeId),
    MatMulTransB(NodeId, NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        stats: Vec<NormStats>,
    },
    Gelu(NodeId),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        n_heads: usize,
        // Row i holds n_heads * (i + 1) weights, rows stored back to back.
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        row_lse: Vec<f64>,
        row_nll: Vec<f64>,
    },
    Sum(NodeId),
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Gather { table, .. } => vec![*table],
            Op::Add(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::MatMulTransB(a, b) => {
                vec![*a, *b]
            }
            Op::AddRowBias { x, bias } => vec![*x, *bias],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Gelu(x) | Op::Sum(x) => vec![*x],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of [`Graph::backward`]: one gradient per `requires_grad` leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<NodeId, Tensor> {
        self.grads
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Per-row losses of a cross-entropy node, in `f64`.
    pub fn row_losses(&self, id: NodeId) -> Option<&[f64]> {
        match &self.nodes[id.0].op {
            Op::CrossEntropy { row_nll, .. } => Some(row_nll),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let needs_grad = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Adds a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Result<NodeId> {
        if !t.all_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        let needs_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn param(&mut self, t: Tensor) -> Result<NodeId> {
        self.leaf(t.with_grad(true))
    }

    pub fn constant(&mut self, t: Tensor) -> Result<NodeId> {
        self.leaf(t.with_grad(false))
    }

    /// Rows of a `[n × d]` table selected by `ids`, giving `[ids.len() × d]`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::Shape {
                op: "gather",
                lhs: t.shape().to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let (n, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n {
                return Err(Error::TargetOutOfRange { target: id, vocab: n });
            }
            data.extend_from_slice(t.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            "gather",
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(value, Op::Add(a, b), "add")
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(value, Op::Mul(a, b), "mul")
    }

    /// Adds a `[d]` vector to every row of `x`.
    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let d = tx.last_dim();
        if tb.len() != d || tb.rank() != 1 {
            return Err(shape_err("add_row_bias", tx, tb));
        }
        let data = tx
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(tb.data()).map(|(a, b)| a + b))
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(value, Op::AddRowBias { x, bias }, "add_row_bias")
    }

    /// `[m × k] · [k × n] → [m × n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, n) = (ta.shape()[0], tb.shape()[1]);
        let mut data = vec![0.0f32; m * n];
        let mut acc = vec![0.0f64; n];
        for i in 0..m {
            kernels::matmul_row(ta.row(i), tb.data(), n, &mut acc, &mut data[i * n..(i + 1) * n]);
        }
        let value = Tensor::new(vec![m, n], data)?;
        self.push(value, Op::MatMul(a, b), "matmul")
    }

    /// `[m × k] · [n × k]ᵀ → [m × n]`.
    pub fn matmul_transb(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(shape_err("matmul_transb", ta, tb));
        }
        let (m, n) = (ta.shape()[0], tb.shape()[0]);
        let mut data = vec![0.0f32; m * n];
        for i in 0..m {
            kernels::matmul_transb_row(ta.row(i), tb.data(), &mut data[i * n..(i + 1) * n]);
        }
        let value = Tensor::new(vec![m, n], data)?;
        self.push(value, Op::MatMulTransB(a, b), "matmul_transb")
    }

    /// Normalizes each row over the last axis, then applies `gain`/`bias`.
    pub fn layernorm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        if eps <= 0.0 {
            return Err(Error::Graph(format!("layernorm eps must be positive, got {eps}")));
        }
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.last_dim();
        if tg.len() != d || tg.rank() != 1 {
            return Err(shape_err("layernorm", tx, tg));
        }
        if tb.len() != d || tb.rank() != 1 {
            return Err(shape_err("layernorm", tx, tb));
        }
        let rows = tx.rows();
        let mut data = vec![0.0f32; tx.len()];
        let mut stats = Vec::with_capacity(rows);
        for i in 0..rows {
            stats.push(kernels::layernorm_row(
                tx.row(i),
                tg.data(),
                tb.data(),
                eps,
                &mut data[i * d..(i + 1) * d],
            ));
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            },
            "layernorm",
        )
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| kernels::gelu(v)).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(value, Op::Gelu(x), "gelu")
    }

    /// Causal scaled dot-product attention over `[T × d]` projections split
    /// into `n_heads` contiguous column groups.
    pub fn causal_attention(&mut self, q: NodeId, k: NodeId, v: NodeId, n_heads: usize) -> Result<NodeId> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.rank() != 2 || tq.shape() != tk.shape() {
            return Err(shape_err("causal_attention", tq, tk));
        }
        if tq.shape() != tv.shape() {
            return Err(shape_err("causal_attention", tq, tv));
        }
        let (t, d) = (tq.shape()[0], tq.shape()[1]);
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::Graph(format!("{d} columns do not split into {n_heads} heads")));
        }
        let mut data = vec![0.0f32; t * d];
        let mut probs = vec![0.0f64; n_heads * t * (t + 1) / 2];
        let mut scores = Vec::with_capacity(t);
        for i in 0..t {
            let off = n_heads * i * (i + 1) / 2;
            kernels::attention_row(
                tq.row(i),
                &tk.data()[..(i + 1) * d],
                &tv.data()[..(i + 1) * d],
                n_heads,
                &mut scores,
                &mut data[i * d..(i + 1) * d],
                Some(&mut probs[off..off + n_heads * (i + 1)]),
            );
        }
        let value = Tensor::new(vec![t, d], data)?;
        self.push(value, Op::Attention { q, k, v, n_heads, probs }, "causal_attention")
    }

    /// `Σ_t -log softmax(logits[t])[targets[t]]` as a scalar.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let tl = self.value(logits);
        if tl.rank() != 2 || tl.shape()[0] != targets.len() {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let vocab = tl.shape()[1];
        let mut row_lse = Vec::with_capacity(targets.len());
        let mut row_nll = Vec::with_capacity(targets.len());
        for (i, &target) in targets.iter().enumerate() {
            if target >= vocab {
                return Err(Error::TargetOutOfRange { target, vocab });
            }
            let row = tl.row(i);
            let lse = kernels::log_sum_exp(row);
            row_lse.push(lse);
            row_nll.push(lse - row[target] as f64);
        }
        let total: f64 = row_nll.iter().sum();
        self.push(
            Tensor::scalar(total as f32),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                row_lse,
                row_nll,
            },
            "softmax_cross_entropy",
        )
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar(total as f32), Op::Sum(x), "sum")
    }

    /// Reverse sweep from a scalar `root`.
    ///
    /// Every `requires_grad` leaf gets an entry; leaves that do not feed the
    /// root get zeros.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.op.inputs().iter().any(|i| i.0 >= idx) {
                return Err(Error::Graph(format!("node {idx} consumes a later node")));
            }
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
        }

        let mut out = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                let data = match &grads[idx] {
                    Some(g) => g.iter().map(|&v| v as f32).collect(),
                    None => vec![0.0; node.value.len()],
                };
                out.insert(NodeId(idx), Tensor::new(node.value.shape().to_vec(), data)?);
            }
        }
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let wants = |id: NodeId| self.nodes[id.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Gather { table, ids } => {
                if wants(*table) {
                    let t = self.value(*table);
                    let d = t.last_dim();
                    let mut dt = vec![0.0f64; t.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            dt[id * d + c] += g[r * d + c];
                        }
                    }
                    accumulate(grads, *table, dt);
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if wants(*a) {
                    let da = g.iter().zip(tb.data()).map(|(&g, &y)| g * y as f64).collect();
                    accumulate(grads, *a, da);
                }
                if wants(*b) {
                    let db = g.iter().zip(ta.data()).map(|(&g, &x)| g * x as f64).collect();
                    accumulate(grads, *b, db);
                }
            }
            Op::AddRowBias { x, bias } => {
                if wants(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
                if wants(*bias) {
                    let d = self.value(*bias).len();
                    let mut db = vec![0.0f64; d];
                    for row in g.chunks(d) {
                        for (s, &v) in db.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    accumulate(grads, *bias, db);
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if wants(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0f64; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let brow = &tb.data()[kk * n..(kk + 1) * n];
                            let mut s = 0.0f64;
                            for (&gv, &bv) in grow.iter().zip(brow) {
                                s += gv * bv as f64;
                            }
                            da[i * k + kk] = s;
                        }
                    }
                    accumulate(grads, *a, da);
                }
                if wants(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0f64; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for (kk, &av) in ta.row(i).iter().enumerate() {
                            let av = av as f64;
                            let dst = &mut db[kk * n..(kk + 1) * n];
                            for (s, &gv) in dst.iter_mut().zip(grow) {
                                *s += av * gv;
                            }
                        }
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::MatMulTransB(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                if wants(*a) {
                    // dA = dC · B
                    let mut da = vec![0.0f64; m * k];
                    for i in 0..m {
                        let dst = &mut da[i * k..(i + 1) * k];
                        for j in 0..n {
                            let gv = g[i * n + j];
                            for (s, &bv) in dst.iter_mut().zip(tb.row(j)) {
                                *s += gv * bv as f64;
                            }
                        }
                    }
                    accumulate(grads, *a, da);
                }
                if wants(*b) {
                    // dB = dCᵀ · A
                    let mut db = vec![0.0f64; n * k];
                    for i in 0..m {
                        let arow = ta.row(i);
                        for j in 0..n {
                            let gv = g[i * n + j];
                            let dst = &mut db[j * k..(j + 1) * k];
                            for (s, &av) in dst.iter_mut().zip(arow) {
                                *s += gv * av as f64;
                            }
                        }
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let (tx, tg) = (self.value(*x), self.value(*gain));
                let d = tx.last_dim();
                let mut dx = vec![0.0f64; tx.len()];
                let mut dgain = vec![0.0f64; d];
                let mut dbias = vec![0.0f64; d];
                let mut xhat = vec![0.0f64; d];
                let mut gh = vec![0.0f64; d];
                for (r, st) in stats.iter().enumerate() {
                    let xr = tx.row(r);
                    let gr = &g[r * d..(r + 1) * d];
                    let (mut mean_g, mut mean_gx) = (0.0f64, 0.0f64);
                    for c in 0..d {
                        xhat[c] = (xr[c] as f64 - st.mean) * st.inv_std;
                        gh[c] = gr[c] * tg.data()[c] as f64;
                        mean_g += gh[c];
                        mean_gx += gh[c] * xhat[c];
                        dgain[c] += gr[c] * xhat[c];
                        dbias[c] += gr[c];
                    }
                    mean_g /= d as f64;
                    mean_gx /= d as f64;
                    for c in 0..d {
                        dx[r * d + c] = st.inv_std * (gh[c] - mean_g - xhat[c] * mean_gx);
                    }
                }
                if wants(*x) {
                    accumulate(grads, *x, dx);
                }
                if wants(*gain) {
                    accumulate(grads, *gain, dgain);
                }
                if wants(*bias) {
                    accumulate(grads, *bias, dbias);
                }
            }
            Op::Gelu(x) => {
                if wants(*x) {
                    let tx = self.value(*x);
                    let dx = g
                        .iter()
                        .zip(tx.data())
                        .map(|(&gv, &xv)| gv * kernels::gelu_grad(xv))
                        .collect();
                    accumulate(grads, *x, dx);
                }
            }
            Op::Attention { q, k, v, n_heads, probs } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let (t, d) = (tq.shape()[0], tq.shape()[1]);
                let dh = d / n_heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0f64; t * d];
                let mut dk = vec![0.0f64; t * d];
                let mut dv = vec![0.0f64; t * d];
                let mut dp = vec![0.0f64; t];
                for i in 0..t {
                    let off = n_heads * i * (i + 1) / 2;
                    let n_keys = i + 1;
                    let go = &g[i * d..(i + 1) * d];
                    for h in 0..*n_heads {
                        let p = &probs[off + h * n_keys..off + (h + 1) * n_keys];
                        let cols = h * dh..(h + 1) * dh;
                        let mut weighted = 0.0f64;
                        for j in 0..n_keys {
                            let vrow = &tv.data()[j * d..(j + 1) * d];
                            let mut s = 0.0f64;
                            for c in cols.clone() {
                                s += go[c] * vrow[c] as f64;
                                dv[j * d + c] += p[j] * go[c];
                            }
                            dp[j] = s;
                            weighted += p[j] * s;
                        }
                        let qrow = tq.row(i);
                        for j in 0..n_keys {
                            let ds = p[j] * (dp[j] - weighted) * scale;
                            let krow = &tk.data()[j * d..(j + 1) * d];
                            for c in cols.clone() {
                                dq[i * d + c] += ds * krow[c] as f64;
                                dk[j * d + c] += ds * qrow[c] as f64;
                            }
                        }
                    }
                }
                if wants(*q) {
                    accumulate(grads, *q, dq);
                }
                if wants(*k) {
                    accumulate(grads, *k, dk);
                }
                if wants(*v) {
                    accumulate(grads, *v, dv);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                row_lse,
                ..
            } => {
                if wants(*logits) {
                    let tl = self.value(*logits);
                    let vocab = tl.last_dim();
                    let upstream = g[0];
                    let mut dl = vec![0.0f64; tl.len()];
                    for (r, (&target, &lse)) in targets.iter().zip(row_lse).enumerate() {
                        let row = tl.row(r);
                        let dst = &mut dl[r * vocab..(r + 1) * vocab];
                        for (s, &x) in dst.iter_mut().zip(row) {
                            *s = upstream * (x as f64 - lse).exp();
                        }
                        dst[target] -= upstream;
                    }
                    accumulate(grads, *logits, dl);
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    accumulate(grads, *x, vec![g[0]; self.value(*x).len()]);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, contribution: Vec<f64>) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}
