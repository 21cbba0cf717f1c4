//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as a node whose parents precede it,
//! so node order is already a topological order. [`Graph::backward`] walks
//! the tape in reverse, accumulating gradients additively; a node's gradient
//! is materialized only when something flows into it.
//!
//! Leaves created with [`Graph::constant`] never receive gradients, and ops
//! whose inputs are all constant are skipped during the backward sweep.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_strided, Layout, Strides, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row-major boolean mask; `true` marks an allowed entry.
#[derive(Clone, Debug)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::dim("mask", &[rows, cols], &[allowed.len()]));
        }
        Ok(Mask { rows, cols, allowed })
    }

    pub fn causal(n: usize) -> Self {
        let allowed = (0..n * n).map(|idx| idx % n <= idx / n).collect();
        Mask { rows: n, cols: n, allowed }
    }

    pub fn allowed(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }
}

/// Packing of several independent causal sequences for multi-head attention.
///
/// Rows `[start, start + len)` of the activation matrix form one sequence.
/// Attention weights of sequence `s`, head `h` occupy an `len × len` block at
/// `offset(s) + h·len²` of the flat score tensor.
#[derive(Clone, Debug)]
pub struct AttnLayout {
    pub heads: usize,
    pub head_dim: usize,
    segments: Vec<(usize, usize)>,
    offsets: Vec<usize>,
    total: usize,
}

impl AttnLayout {
    pub fn new(heads: usize, head_dim: usize, lens: &[usize]) -> Self {
        let mut segments = Vec::with_capacity(lens.len());
        let mut offsets = Vec::with_capacity(lens.len());
        let (mut row, mut off) = (0, 0);
        for &len in lens {
            segments.push((row, len));
            offsets.push(off);
            row += len;
            off += heads * len * len;
        }
        AttnLayout {
            heads,
            head_dim,
            segments,
            offsets,
            total: off,
        }
    }

    pub fn single(heads: usize, head_dim: usize, len: usize) -> Self {
        Self::new(heads, head_dim, &[len])
    }

    pub fn rows(&self) -> usize {
        self.segments.iter().map(|s| s.1).sum()
    }

    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn segments(&self) -> &[(usize, usize)] {
        &self.segments
    }

    /// Offset of the `len × len` block for `(segment, head)`.
    pub fn block(&self, segment: usize, head: usize) -> usize {
        let len = self.segments[segment].1;
        self.offsets[segment] + head * len * len
    }

    fn score_shape(&self) -> Vec<usize> {
        match self.segments.as_slice() {
            [(_, n)] => vec![self.heads, *n, *n],
            _ => vec![self.total],
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    Sum(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    SoftmaxRows(Var),
    Bce {
        p: Var,
        target: Tensor,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor,
    },
    AttnScores {
        q: Var,
        k: Var,
        layout: Rc<AttnLayout>,
        scale: f64,
    },
    CausalSoftmax {
        x: Var,
        layout: Rc<AttnLayout>,
    },
    AttnMix {
        a: Var,
        v: Var,
        layout: Rc<AttnLayout>,
    },
    GroupDot {
        q: Var,
        k: Var,
        group: usize,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    needs_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;
const BCE_CLAMP: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of `v`, zeros if nothing reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[v.0].value.shape()),
        }
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::dim(op, s, &[]));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Layout::Normal,
            self.value(b).data(),
            Layout::Normal,
            out.data_mut(),
            0.0,
        );
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Adds a length-`n` vector to every row of an `m × n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(bias).len() != n {
            return Err(Error::dim("add_row", self.shape(x), self.shape(bias)));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        for row in out.data_mut().chunks_exact_mut(n) {
            row.iter_mut().zip(b).for_each(|(o, v)| *o += v);
        }
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::AddRow(x, bias), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::from_vec(self.shape(a), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, s), ng)
    }

    /// Identity that always receives a gradient, so intermediate values
    /// computed from constants can be differentiated against.
    pub fn watch(&mut self, x: Var) -> Var {
        let out = self.value(x).clone();
        self.push(out, Op::Scale(x, 1.0), true)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let ng = self.needs(x);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let ng = self.needs(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.needs(x);
        self.push(out, Op::Sum(x), ng)
    }

    /// Per-row standardization followed by an elementwise affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if d == 0 || self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        let rows = self.value(x).rows();
        let mut xhat = Tensor::zeros(self.shape(x));
        let mut out = Tensor::zeros(self.shape(x));
        let mut rstd = Vec::with_capacity(rows);
        {
            let xv = self.value(x);
            let (g, b) = (self.value(gain).data(), self.value(bias).data());
            for r in 0..rows {
                let row = xv.row(r);
                let (mean, rs) = row_moments(row);
                rstd.push(rs);
                let xh = xhat.row_mut(r);
                for c in 0..d {
                    xh[c] = (row[c] - mean) * rs;
                }
                let xh = xhat.row(r).to_vec();
                let o = out.row_mut(r);
                for c in 0..d {
                    o[c] = xh[c] * g[c] + b[c];
                }
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Gathers rows `ids` of `table` into a new matrix.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.matrix_dims("embedding", table)?;
        let mut out = Tensor::zeros(&[ids.len(), d]);
        for (r, &id) in ids.iter().enumerate() {
            if id >= vocab {
                return Err(Error::Bounds {
                    index: id,
                    extent: vocab,
                });
            }
            out.row_mut(r).copy_from_slice(self.value(table).row(id));
        }
        let ng = self.needs(table);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let d = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != d || v.shape().len() != 2 {
                return Err(Error::dim("concat_rows", self.shape(first), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::from_vec(&[rows, d], data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_rows(start, len)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::SliceRows { x, start }, ng))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        let mut out = Tensor::zeros(&[rows.len(), d]);
        for (i, &r) in rows.iter().enumerate() {
            if r >= xv.rows() {
                return Err(Error::Bounds {
                    index: r,
                    extent: xv.rows(),
                });
            }
            out.row_mut(i).copy_from_slice(xv.row(r));
        }
        let ng = self.needs(x);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    /// Row-wise softmax. Masked entries are exactly zero; a row with no
    /// allowed entry is an error.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&Mask>) -> Result<Var> {
        let (m, n) = self.matrix_dims("softmax_rows", x)?;
        if let Some(mk) = mask {
            if mk.rows != m || mk.cols != n {
                return Err(Error::dim("softmax_rows", &[m, n], &[mk.rows, mk.cols]));
            }
        }
        let mut out = Tensor::zeros(&[m, n]);
        for r in 0..m {
            let row = self.value(x).row(r);
            let allow = |c: usize| mask.is_none_or(|mk| mk.allowed(r, c));
            let max = (0..n)
                .filter(|&c| allow(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::InvalidMask { row: r });
            }
            let o = out.row_mut(r);
            let mut z = 0.0;
            for c in 0..n {
                if allow(c) {
                    o[c] = (row[c] - max).exp();
                    z += o[c];
                }
            }
            o.iter_mut().for_each(|v| *v /= z);
        }
        let ng = self.needs(x);
        Ok(self.push(out, Op::SoftmaxRows(x), ng))
    }

    /// Mean binary cross-entropy between probabilities `p` and 0/1 targets.
    pub fn binary_cross_entropy(&mut self, p: Var, target: &Tensor) -> Result<Var> {
        if self.value(p).len() != target.len() {
            return Err(Error::dim("binary_cross_entropy", self.shape(p), target.shape()));
        }
        let n = target.len() as f64;
        let loss = self
            .value(p)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n;
        let ng = self.needs(p);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                target: target.clone(),
            },
            ng,
        ))
    }

    /// Mean softmax cross-entropy of each logit row against its target class.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix_dims("cross_entropy", logits)?;
        if targets.len() != m {
            return Err(Error::dim("cross_entropy", &[m, n], &[targets.len()]));
        }
        let mut probs = Tensor::zeros(&[m, n]);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= n {
                return Err(Error::Bounds { index: t, extent: n });
            }
            let row = self.value(logits).row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            loss += z.ln() + max - row[t];
            let pr = probs.row_mut(r);
            for c in 0..n {
                pr[c] = (row[c] - max).exp() / z;
            }
        }
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss / m as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Per-head scaled dot products `scale · Q_h K_hᵀ` for every sequence of
    /// the layout. Entries above the diagonal are computed but later masked.
    pub fn attn_scores(&mut self, q: Var, k: Var, layout: &Rc<AttnLayout>, scale: f64) -> Result<Var> {
        let d = layout.model_dim();
        for v in [q, k] {
            if self.value(v).shape() != [layout.rows(), d] {
                return Err(Error::dim("attn_scores", self.shape(v), &[layout.rows(), d]));
            }
        }
        let mut out = Tensor::zeros(&layout.score_shape());
        let dh = layout.head_dim;
        let (qd, kd) = (self.value(q).data(), self.value(k).data());
        for (s, &(start, n)) in layout.segments.iter().enumerate() {
            for h in 0..layout.heads {
                let off = layout.block(s, h);
                let base = start * d + h * dh;
                // SAFETY: head views stay within rows [start, start+n) and
                // columns [h·dh, (h+1)·dh) of the q/k matrices.
                unsafe {
                    gemm_strided(
                        n,
                        dh,
                        n,
                        qd.as_ptr().add(base),
                        Strides::row_major(d),
                        kd.as_ptr().add(base),
                        Strides::col_major(d),
                        0.0,
                        out.data_mut().as_mut_ptr().add(off),
                        Strides::row_major(n),
                    );
                }
            }
        }
        out.scale_assign(scale);
        let ng = self.needs(q) || self.needs(k);
        Ok(self.push(
            out,
            Op::AttnScores {
                q,
                k,
                layout: Rc::clone(layout),
                scale,
            },
            ng,
        ))
    }

    /// Causal row softmax over every `(sequence, head)` block.
    pub fn causal_softmax(&mut self, x: Var, layout: &Rc<AttnLayout>) -> Result<Var> {
        if self.value(x).len() != layout.total {
            return Err(Error::dim("causal_softmax", self.shape(x), &[layout.total]));
        }
        let mut out = Tensor::zeros(self.shape(x));
        {
            let xd = self.value(x).data();
            let od = out.data_mut();
            for (s, &(_, n)) in layout.segments.iter().enumerate() {
                for h in 0..layout.heads {
                    let off = layout.block(s, h);
                    for i in 0..n {
                        let row = &xd[off + i * n..off + i * n + i + 1];
                        let o = &mut od[off + i * n..off + i * n + i + 1];
                        causal_row_softmax(row, o);
                    }
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(
            out,
            Op::CausalSoftmax {
                x,
                layout: Rc::clone(layout),
            },
            ng,
        ))
    }

    /// Attention-weighted mix of value rows, heads written side by side.
    pub fn attn_mix(&mut self, a: Var, v: Var, layout: &Rc<AttnLayout>) -> Result<Var> {
        let d = layout.model_dim();
        if self.value(v).shape() != [layout.rows(), d] || self.value(a).len() != layout.total {
            return Err(Error::dim("attn_mix", self.shape(a), self.shape(v)));
        }
        let dh = layout.head_dim;
        let mut out = Tensor::zeros(&[layout.rows(), d]);
        let (ad, vd) = (self.value(a).data(), self.value(v).data());
        for (s, &(start, n)) in layout.segments.iter().enumerate() {
            for h in 0..layout.heads {
                let off = layout.block(s, h);
                let base = start * d + h * dh;
                // SAFETY: see attn_scores; the output view is disjoint per head.
                unsafe {
                    gemm_strided(
                        n,
                        n,
                        dh,
                        ad.as_ptr().add(off),
                        Strides::row_major(n),
                        vd.as_ptr().add(base),
                        Strides::row_major(d),
                        0.0,
                        out.data_mut().as_mut_ptr().add(base),
                        Strides::row_major(d),
                    );
                }
            }
        }
        let ng = self.needs(a) || self.needs(v);
        Ok(self.push(
            out,
            Op::AttnMix {
                a,
                v,
                layout: Rc::clone(layout),
            },
            ng,
        ))
    }

    /// `out[b, g] = q[b] · k[b·group + g]` for `q: B×d`, `k: (B·group)×d`.
    pub fn group_dot(&mut self, q: Var, k: Var, group: usize) -> Result<Var> {
        let (b, d) = self.matrix_dims("group_dot", q)?;
        let (kr, kd) = self.matrix_dims("group_dot", k)?;
        if kd != d || kr != b * group {
            return Err(Error::dim("group_dot", self.shape(q), self.shape(k)));
        }
        let mut out = Tensor::zeros(&[b, group]);
        for i in 0..b {
            let qr = self.value(q).row(i);
            for g in 0..group {
                let kr = self.value(k).row(i * group + g);
                out.data_mut()[i * group + g] = dot(qr, kr);
            }
        }
        let ng = self.needs(q) || self.needs(k);
        Ok(self.push(out, Op::GroupDot { q, k, group }, ng))
    }

    /// Reverse sweep from a scalar `loss`, accumulating into every reachable
    /// differentiable node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let seed = Tensor::full(self.shape(loss), 1.0);
        match &mut self.nodes[loss.0].grad {
            Some(g) => g.add_assign(&seed),
            slot @ None => *slot = Some(seed),
        }
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(grad) = node.grad.as_ref() else {
                continue;
            };
            if !node.needs_grad {
                continue;
            }
            propagate(before, node, grad);
        }
        Ok(())
    }
}

fn grad_slot<'a>(nodes: &'a mut [Node], v: Var) -> Option<&'a mut Tensor> {
    let n = &mut nodes[v.0];
    if !n.needs_grad {
        return None;
    }
    if n.grad.is_none() {
        n.grad = Some(Tensor::zeros(n.value.shape()));
    }
    n.grad.as_mut()
}

fn propagate(nodes: &mut [Node], node: &Node, g: &Tensor) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
            let n = nodes[b.0].value.shape()[1];
            if nodes[a.0].needs_grad {
                let bv = nodes[b.0].value.clone();
                let ga = grad_slot(nodes, *a).expect("needs grad");
                gemm(m, n, k, g.data(), Layout::Normal, bv.data(), Layout::Transposed, ga.data_mut(), 1.0);
            }
            if nodes[b.0].needs_grad {
                let av = nodes[a.0].value.clone();
                let gb = grad_slot(nodes, *b).expect("needs grad");
                gemm(k, m, n, av.data(), Layout::Transposed, g.data(), Layout::Normal, gb.data_mut(), 1.0);
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(gv) = grad_slot(nodes, *v) {
                    gv.add_assign(g);
                }
            }
        }
        Op::AddRow(x, bias) => {
            if let Some(gx) = grad_slot(nodes, *x) {
                gx.add_assign(g);
            }
            if let Some(gb) = grad_slot(nodes, *bias) {
                let n = g.cols();
                for row in g.data().chunks_exact(n) {
                    gb.data_mut().iter_mut().zip(row).for_each(|(o, v)| *o += v);
                }
            }
        }
        Op::Mul(a, b) => {
            let av = nodes[a.0].value.clone();
            let bv = nodes[b.0].value.clone();
            if let Some(ga) = grad_slot(nodes, *a) {
                for ((o, gi), bi) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                    *o += gi * bi;
                }
            }
            if let Some(gb) = grad_slot(nodes, *b) {
                for ((o, gi), ai) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                    *o += gi * ai;
                }
            }
        }
        Op::Scale(x, s) => {
            if let Some(gx) = grad_slot(nodes, *x) {
                gx.data_mut().iter_mut().zip(g.data()).for_each(|(o, v)| *o += s * v);
            }
        }
        Op::Gelu(x) => {
            let xv = nodes[x.0].value.clone();
            if let Some(gx) = grad_slot(nodes, *x) {
                for ((o, gi), &xi) in gx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                    *o += gi * gelu_grad(xi);
                }
            }
        }
        Op::Sigmoid(x) => {
            if let Some(gx) = grad_slot(nodes, *x) {
                for ((o, gi), &s) in gx.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                    *o += gi * s * (1.0 - s);
                }
            }
        }
        Op::Sum(x) => {
            let s = g.data()[0];
            if let Some(gx) = grad_slot(nodes, *x) {
                gx.data_mut().iter_mut().for_each(|o| *o += s);
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let d = xhat.cols();
            let rows = xhat.rows();
            let gv = nodes[gain.0].value.clone();
            if let Some(gg) = grad_slot(nodes, *gain) {
                for r in 0..rows {
                    let (gr, xr) = (g.row(r), xhat.row(r));
                    for c in 0..d {
                        gg.data_mut()[c] += gr[c] * xr[c];
                    }
                }
            }
            if let Some(gb) = grad_slot(nodes, *bias) {
                for r in 0..rows {
                    gb.data_mut().iter_mut().zip(g.row(r)).for_each(|(o, v)| *o += v);
                }
            }
            if let Some(gx) = grad_slot(nodes, *x) {
                let mut dxhat = vec![0.0; d];
                for r in 0..rows {
                    let (gr, xr) = (g.row(r), xhat.row(r));
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for c in 0..d {
                        dxhat[c] = gr[c] * gv.data()[c];
                        mean_d += dxhat[c];
                        mean_dx += dxhat[c] * xr[c];
                    }
                    mean_d /= d as f64;
                    mean_dx /= d as f64;
                    let o = gx.row_mut(r);
                    for c in 0..d {
                        o[c] += rstd[r] * (dxhat[c] - mean_d - xr[c] * mean_dx);
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            if let Some(gt) = grad_slot(nodes, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    gt.row_mut(id).iter_mut().zip(g.row(r)).for_each(|(o, v)| *o += v);
                }
            }
        }
        Op::ConcatRows(parts) => {
            let d = g.cols();
            let mut offset = 0;
            for p in parts {
                let len = nodes[p.0].value.len();
                if let Some(gp) = grad_slot(nodes, *p) {
                    gp.data_mut()
                        .iter_mut()
                        .zip(&g.data()[offset..offset + len])
                        .for_each(|(o, v)| *o += v);
                }
                offset += len;
                debug_assert_eq!(len % d, 0);
            }
        }
        Op::SliceRows { x, start } => {
            if let Some(gx) = grad_slot(nodes, *x) {
                let d = g.cols();
                let dst = &mut gx.data_mut()[start * d..start * d + g.len()];
                dst.iter_mut().zip(g.data()).for_each(|(o, v)| *o += v);
            }
        }
        Op::GatherRows { x, rows } => {
            if let Some(gx) = grad_slot(nodes, *x) {
                for (i, &r) in rows.iter().enumerate() {
                    gx.row_mut(r).iter_mut().zip(g.row(i)).for_each(|(o, v)| *o += v);
                }
            }
        }
        Op::SoftmaxRows(x) => {
            if let Some(gx) = grad_slot(nodes, *x) {
                for r in 0..out.rows() {
                    let (y, gr) = (out.row(r), g.row(r));
                    let s = dot(y, gr);
                    let o = gx.row_mut(r);
                    for c in 0..y.len() {
                        o[c] += y[c] * (gr[c] - s);
                    }
                }
            }
        }
        Op::Bce { p, target } => {
            let pv = nodes[p.0].value.clone();
            let scale = g.data()[0] / target.len() as f64;
            if let Some(gp) = grad_slot(nodes, *p) {
                for ((o, &pi), &t) in gp.data_mut().iter_mut().zip(pv.data()).zip(target.data()) {
                    let pc = pi.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                    *o += scale * (pc - t) / (pc * (1.0 - pc));
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let scale = g.data()[0] / targets.len() as f64;
            if let Some(gl) = grad_slot(nodes, *logits) {
                for (r, &t) in targets.iter().enumerate() {
                    let o = gl.row_mut(r);
                    for (c, &p) in probs.row(r).iter().enumerate() {
                        o[c] += scale * (p - if c == t { 1.0 } else { 0.0 });
                    }
                }
            }
        }
        Op::AttnScores { q, k, layout, scale } => {
            let d = layout.model_dim();
            let dh = layout.head_dim;
            let gs: Vec<f64> = g.data().iter().map(|v| v * scale).collect();
            let qv = nodes[q.0].value.clone();
            let kv = nodes[k.0].value.clone();
            for (target, other, transpose) in [(*q, &kv, false), (*k, &qv, true)] {
                let Some(gt) = grad_slot(nodes, target) else {
                    continue;
                };
                for (s, &(start, n)) in layout.segments.iter().enumerate() {
                    for h in 0..layout.heads {
                        let off = layout.block(s, h);
                        let base = start * d + h * dh;
                        let gsv = if transpose {
                            Strides::col_major(n)
                        } else {
                            Strides::row_major(n)
                        };
                        // SAFETY: same views as the forward pass.
                        unsafe {
                            gemm_strided(
                                n,
                                n,
                                dh,
                                gs.as_ptr().add(off),
                                gsv,
                                other.data().as_ptr().add(base),
                                Strides::row_major(d),
                                1.0,
                                gt.data_mut().as_mut_ptr().add(base),
                                Strides::row_major(d),
                            );
                        }
                    }
                }
            }
        }
        Op::CausalSoftmax { x, layout } => {
            if let Some(gx) = grad_slot(nodes, *x) {
                let (yd, gd) = (out.data(), g.data());
                let od = gx.data_mut();
                for (s, &(_, n)) in layout.segments.iter().enumerate() {
                    for h in 0..layout.heads {
                        let off = layout.block(s, h);
                        for i in 0..n {
                            let lo = off + i * n;
                            let y = &yd[lo..lo + i + 1];
                            let gr = &gd[lo..lo + i + 1];
                            let sdot = dot(y, gr);
                            for j in 0..=i {
                                od[lo + j] += y[j] * (gr[j] - sdot);
                            }
                        }
                    }
                }
            }
        }
        Op::AttnMix { a, v, layout } => {
            let d = layout.model_dim();
            let dh = layout.head_dim;
            let av = nodes[a.0].value.clone();
            let vv = nodes[v.0].value.clone();
            if let Some(ga) = grad_slot(nodes, *a) {
                for (s, &(start, n)) in layout.segments.iter().enumerate() {
                    for h in 0..layout.heads {
                        let off = layout.block(s, h);
                        let base = start * d + h * dh;
                        // SAFETY: dA_h = dOut_h · V_hᵀ over the forward views.
                        unsafe {
                            gemm_strided(
                                n,
                                dh,
                                n,
                                g.data().as_ptr().add(base),
                                Strides::row_major(d),
                                vv.data().as_ptr().add(base),
                                Strides::col_major(d),
                                1.0,
                                ga.data_mut().as_mut_ptr().add(off),
                                Strides::row_major(n),
                            );
                        }
                    }
                }
            }
            if let Some(gv) = grad_slot(nodes, *v) {
                for (s, &(start, n)) in layout.segments.iter().enumerate() {
                    for h in 0..layout.heads {
                        let off = layout.block(s, h);
                        let base = start * d + h * dh;
                        // SAFETY: dV_h = A_hᵀ · dOut_h over the forward views.
                        unsafe {
                            gemm_strided(
                                n,
                                n,
                                dh,
                                av.data().as_ptr().add(off),
                                Strides::col_major(n),
                                g.data().as_ptr().add(base),
                                Strides::row_major(d),
                                1.0,
                                gv.data_mut().as_mut_ptr().add(base),
                                Strides::row_major(d),
                            );
                        }
                    }
                }
            }
        }
        Op::GroupDot { q, k, group } => {
            let group = *group;
            let qv = nodes[q.0].value.clone();
            let kv = nodes[k.0].value.clone();
            let b = qv.rows();
            if let Some(gq) = grad_slot(nodes, *q) {
                for i in 0..b {
                    let o = gq.row_mut(i);
                    for gi in 0..group {
                        let w = g.data()[i * group + gi];
                        o.iter_mut().zip(kv.row(i * group + gi)).for_each(|(o, k)| *o += w * k);
                    }
                }
            }
            if let Some(gk) = grad_slot(nodes, *k) {
                for i in 0..b {
                    for gi in 0..group {
                        let w = g.data()[i * group + gi];
                        gk.row_mut(i * group + gi)
                            .iter_mut()
                            .zip(qv.row(i))
                            .for_each(|(o, q)| *o += w * q);
                    }
                }
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean and reciprocal standard deviation of a row, with the layer-norm
/// epsilon folded into the variance.
pub(crate) fn row_moments(row: &[f64]) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

/// Softmax of `row` into `out`, both covering only the allowed prefix.
pub(crate) fn causal_row_softmax(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_forward_cases() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1, 2], &[1.0, 0.0]));
        let b = g.constant(t(&[2, 1], &[0.0, 1.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.param(Tensor::zeros(&[3, 4]));
        let b = g.param(Tensor::zeros(&[3, 2]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[3, 4]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn softmax_symmetric_and_masked() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[0.0, 0.0, 5.0, -3.0]));
        let mask = Mask::new(2, 2, vec![true, true, true, false]).unwrap();
        let y = g.softmax_rows(x, Some(&mask)).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5, 1.0, 0.0]);
    }

    #[test]
    fn fully_masked_row_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 2]));
        let mask = Mask::new(2, 2, vec![true, false, false, false]).unwrap();
        assert!(matches!(g.softmax_rows(x, Some(&mask)), Err(Error::InvalidMask { row: 1 })));
    }

    #[test]
    fn layer_norm_cases() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[3.0, 3.0, 1.0, -1.0]));
        let gain = g.param(Tensor::full(&[2], 1.0));
        let bias = g.param(Tensor::zeros(&[2]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        let v = g.value(y).data();
        assert_eq!(&v[..2], &[0.0, 0.0]);
        assert!((v[2] - 1.0).abs() < 1e-5 && (v[3] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[2, 3], 7.0));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_zero_scaled_is_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[4], 2.0));
        let y = g.scale(x, 0.0);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn unreachable_node_untouched() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[3], 1.0));
        let unused = g.param(Tensor::full(&[3], 1.0));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.grad(unused).is_none());
        assert_eq!(g.grad_or_zeros(unused).data(), &[0.0; 3]);
    }

    #[test]
    fn backward_on_non_scalar_is_contract_error() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[2], 3.0));
        let y = g.add(x, x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn causal_softmax_rows_sum_to_one_and_mask_upper() {
        let layout = Rc::new(AttnLayout::new(2, 2, &[3, 2]));
        let mut g = Graph::new();
        let q = g.constant(Tensor::from_vec(&[5, 4], (0..20).map(|v| v as f64 * 0.1).collect()).unwrap());
        let k = g.constant(Tensor::from_vec(&[5, 4], (0..20).map(|v| (v as f64 * 0.37).sin()).collect()).unwrap());
        let s = g.attn_scores(q, k, &layout, 0.5).unwrap();
        let a = g.causal_softmax(s, &layout).unwrap();
        let ad = g.value(a).data();
        for (seg, &(_, n)) in layout.segments().iter().enumerate() {
            for h in 0..2 {
                let off = layout.block(seg, h);
                for i in 0..n {
                    let row = &ad[off + i * n..off + (i + 1) * n];
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    assert!(row[i + 1..].iter().all(|&v| v == 0.0));
                }
            }
        }
    }
}
