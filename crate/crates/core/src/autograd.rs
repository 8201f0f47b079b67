//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only arena: every op evaluates eagerly, stores its
//! output, and records enough state to run its backward rule. Node ids are
//! handed out in creation order, so the arena is always topologically sorted.
//! A fresh graph is built for every training step.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{as_matrix, gemm, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mask {
    None,
    Causal,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    MatMulNt {
        a: NodeId,
        b: NodeId,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        factor: f64,
    },
    MulExp {
        x: NodeId,
        s: NodeId,
    },
    Transpose {
        x: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu {
        x: NodeId,
    },
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        segments: Vec<usize>,
        probs: Vec<f64>,
    },
    GatherRows {
        sources: Vec<NodeId>,
        index: Vec<(usize, usize)>,
    },
    SegmentMean {
        x: NodeId,
        segments: Vec<usize>,
    },
    L2NormalizeRows {
        x: NodeId,
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse {
        a: NodeId,
        b: NodeId,
    },
    Sum {
        x: NodeId,
    },
    Mean {
        x: NodeId,
    },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b }
            | Op::MatMulNt { a, b }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b }
            | Op::Mse { a, b } => vec![*a, *b],
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::Scale { x, .. }
            | Op::Transpose { x }
            | Op::Gelu { x }
            | Op::Dropout { x, .. }
            | Op::SegmentMean { x, .. }
            | Op::L2NormalizeRows { x, .. }
            | Op::Sum { x }
            | Op::Mean { x } => vec![*x],
            Op::MulExp { x, s } => vec![*x, *s],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::GatherRows { sources, .. } => sources.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients for every differentiable leaf reachable from the loss.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<NodeId, Tensor>,
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

    pub fn contains(&self, id: NodeId) -> bool {
        self.grads.contains_key(&id)
    }
}

impl Graph {
    /// Non-finite checking follows the build: on with debug assertions.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
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

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, op: Op, value: Tensor) -> Result<NodeId> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let id = self.nodes.len();
        let mut requires_grad = false;
        for input in op.inputs() {
            if input.0 >= id {
                return Err(Error::GraphOrder {
                    node: id,
                    input: input.0,
                });
            }
            requires_grad |= self.nodes[input.0].requires_grad;
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId(id))
    }

    fn matrix(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        as_matrix(self.value(id), op)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        self.push("matmul", Op::MatMul { a, b }, Tensor::from_parts(vec![m, n], out))
    }

    /// `a * b^T` for `a: [m x k]`, `b: [n x k]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.matrix(a, "matmul_nt")?;
        let (n, k2) = self.matrix(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("[{m}x{k}] x [{n}x{k2}]^T")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            &mut out,
            0.0,
        );
        self.push("matmul_nt", Op::MatMulNt { a, b }, Tensor::from_parts(vec![m, n], out))
    }

    /// `x * w + b` with `x: [n x in]`, `w: [in x out]`, `b: [out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (n, i) = self.matrix(x, "linear")?;
        let (i2, o) = self.matrix(w, "linear")?;
        if i != i2 {
            return Err(Error::shape("linear", format!("input width {i} vs weight [{i2}x{o}]")));
        }
        let mut out = vec![0.0; n * o];
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.len() != o {
                return Err(Error::shape("linear", format!("bias length {} vs {o}", bias.len())));
            }
            for row in out.chunks_mut(o) {
                row.copy_from_slice(bias.data());
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(
            n,
            i,
            o,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            beta,
        );
        self.push("linear", Op::Linear { x, w, b }, Tensor::from_parts(vec![n, o], out))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip(&mut self, a: NodeId, b: NodeId, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<NodeId> {
        self.same_shape(a, b, name)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(name, op, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip(a, b, "add", Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip(a, b, "sub", Op::Sub { a, b }, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip(a, b, "mul", Op::Mul { a, b }, |x, y| x * y)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let value = self.value(x).map(|v| v * factor);
        self.push("scale", Op::Scale { x, factor }, value)
    }

    /// `x * exp(s)` for a scalar node `s` (a learnable log-scale).
    pub fn mul_exp(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("mul_exp", "scale must be a scalar"));
        }
        let factor = self.value(s).item().exp();
        let value = self.value(x).map(|v| v * factor);
        self.push("mul_exp", Op::MulExp { x, s }, value)
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.matrix(x, "transpose")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push("transpose", Op::Transpose { x }, Tensor::from_parts(vec![c, r], out))
    }

    /// Layer normalization over the last axis with the biased variance.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let xv = self.value(x);
        let d = xv.width();
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "width {d} vs gamma {} / beta {}",
                    self.value(gamma).len(),
                    self.value(beta).len()
                ),
            ));
        }
        if eps <= 0.0 {
            return Err(Error::shape("layer_norm", "eps must be positive"));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push(
            "layer_norm",
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            value,
        )
    }

    /// Exact GeLU, `x * Phi(x)`.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).map(gelu);
        self.push("gelu", Op::Gelu { x }, value)
    }

    /// Inverted dropout. A rate of zero returns `x` unchanged.
    pub fn dropout(&mut self, x: NodeId, rate: f64, rng: &mut impl Rng) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::shape("dropout", format!("rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push("dropout", Op::Dropout { x, mask }, value)
    }

    /// Single-head scaled dot-product attention over one sequence.
    pub fn softmax_attention(&mut self, q: NodeId, k: NodeId, v: NodeId, mask: Mask) -> Result<NodeId> {
        let t = self.matrix(q, "softmax_attention")?.0;
        self.attention(q, k, v, 1, &[t], mask)
    }

    /// Multi-head attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[N x d]` with the rows of several sequences stacked;
    /// `segments` lists their lengths. Attention never crosses a segment.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        segments: &[usize],
        mask: Mask,
    ) -> Result<NodeId> {
        let (n, d) = self.matrix(q, "attention")?;
        if self.value(k).shape() != [n, d] || self.value(v).shape() != [n, d] {
            return Err(Error::shape(
                "attention",
                format!(
                    "q {:?} k {:?} v {:?}",
                    [n, d],
                    self.value(k).shape(),
                    self.value(v).shape()
                ),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("width {d} not divisible into {heads} heads"),
            ));
        }
        if segments.iter().sum::<usize>() != n || segments.contains(&0) {
            return Err(Error::shape(
                "attention",
                format!("segments {segments:?} do not tile {n} rows"),
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; n * d];
        let mut probs = Vec::with_capacity(segments.iter().map(|t| t * t * heads).sum());
        let mut offset = 0;
        for &t in segments {
            for h in 0..heads {
                let col = h * dh;
                let base = probs.len();
                probs.resize(base + t * t, 0.0);
                let p = &mut probs[base..];
                for i in 0..t {
                    let qi = &qv[(offset + i) * d + col..(offset + i) * d + col + dh];
                    let limit = if mask == Mask::Causal { i + 1 } else { t };
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..limit {
                        let kj = &kv[(offset + j) * d + col..(offset + j) * d + col + dh];
                        let s = dot(qi, kj) * scale;
                        p[i * t + j] = s;
                        max = max.max(s);
                    }
                    let mut z = 0.0;
                    for j in 0..limit {
                        let e = (p[i * t + j] - max).exp();
                        p[i * t + j] = e;
                        z += e;
                    }
                    let o = &mut out[(offset + i) * d + col..(offset + i) * d + col + dh];
                    for j in 0..limit {
                        let w = p[i * t + j] / z;
                        p[i * t + j] = w;
                        let vj = &vv[(offset + j) * d + col..(offset + j) * d + col + dh];
                        for (oc, vc) in o.iter_mut().zip(vj) {
                            *oc += w * vc;
                        }
                    }
                }
            }
            offset += t;
        }
        let value = Tensor::from_parts(vec![n, d], out);
        self.push(
            "attention",
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
            value,
        )
    }

    /// Builds a matrix whose row `r` is row `index[r].1` of `sources[index[r].0]`.
    pub fn gather_rows(&mut self, sources: &[NodeId], index: &[(usize, usize)]) -> Result<NodeId> {
        let width = match sources.first() {
            Some(&s) => self.value(s).width(),
            None => return Err(Error::shape("gather_rows", "no sources")),
        };
        if index.is_empty() {
            return Err(Error::shape("gather_rows", "empty index"));
        }
        for &s in sources {
            if self.value(s).width() != width {
                return Err(Error::shape("gather_rows", "sources differ in width"));
            }
        }
        let mut out = Vec::with_capacity(index.len() * width);
        for &(src, row) in index {
            let t = sources
                .get(src)
                .map(|&s| self.value(s))
                .ok_or_else(|| Error::shape("gather_rows", format!("source {src} out of range")))?;
            if row >= t.rows() {
                return Err(Error::shape(
                    "gather_rows",
                    format!("row {row} out of range {}", t.rows()),
                ));
            }
            out.extend_from_slice(t.row(row));
        }
        let value = Tensor::from_parts(vec![index.len(), width], out);
        self.push(
            "gather_rows",
            Op::GatherRows {
                sources: sources.to_vec(),
                index: index.to_vec(),
            },
            value,
        )
    }

    /// Mean of consecutive row groups.
    pub fn segment_mean(&mut self, x: NodeId, segments: &[usize]) -> Result<NodeId> {
        let (n, d) = self.matrix(x, "segment_mean")?;
        if segments.iter().sum::<usize>() != n || segments.contains(&0) {
            return Err(Error::shape(
                "segment_mean",
                format!("segments {segments:?} do not tile {n} rows"),
            ));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; segments.len() * d];
        let mut offset = 0;
        for (s, &len) in segments.iter().enumerate() {
            let o = &mut out[s * d..(s + 1) * d];
            for r in offset..offset + len {
                for (oc, xc) in o.iter_mut().zip(xv.row(r)) {
                    *oc += xc;
                }
            }
            o.iter_mut().for_each(|v| *v /= len as f64);
            offset += len;
        }
        let value = Tensor::from_parts(vec![segments.len(), d], out);
        self.push(
            "segment_mean",
            Op::SegmentMean {
                x,
                segments: segments.to_vec(),
            },
            value,
        )
    }

    pub fn l2_normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let d = xv.width();
        let mut norms = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.len());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let norm = dot(row, row).sqrt().max(1e-12);
            norms.push(norm);
            out.extend(row.iter().map(|v| v / norm));
        }
        debug_assert_eq!(out.len(), xv.rows() * d);
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push("l2_normalize_rows", Op::L2NormalizeRows { x, norms }, value)
    }

    /// Mean softmax cross-entropy of each row against its target class.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (n, c) = self.matrix(logits, "cross_entropy")?;
        if targets.len() != n || targets.iter().any(|&t| t >= c) {
            return Err(Error::shape("cross_entropy", "targets do not match logits"));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for r in 0..n {
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for j in 0..c {
                probs[r * c + j] = (row[j] - max).exp() / z;
            }
            loss += -(row[targets[r]] - max - z.ln());
        }
        let value = Tensor::scalar(loss / n as f64);
        self.push(
            "cross_entropy",
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            value,
        )
    }

    /// Mean squared error over all components.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mse")?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let s: f64 = va.iter().zip(vb).map(|(x, y)| (x - y) * (x - y)).sum();
        let value = Tensor::scalar(s / va.len() as f64);
        self.push("mse", Op::Mse { a, b }, value)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push("sum", Op::Sum { x }, value)
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let value = Tensor::scalar(xv.data().iter().sum::<f64>() / xv.len() as f64);
        self.push("mean", Op::Mean { x }, value)
    }

    /// Reverse-mode pass from a scalar `loss`.
    ///
    /// Only nodes that are ancestors of `loss` and that lead to a
    /// differentiable leaf are visited. Constant leaves get no gradient.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        let mut out = Gradients::default();
        if !self.nodes[loss.0].requires_grad {
            return Ok(out);
        }
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Op::Leaf = node.op {
                if node.requires_grad {
                    out.grads
                        .insert(NodeId(id), Tensor::from_parts(node.value.shape().to_vec(), g));
                }
                continue;
            }
            self.backward_op(id, &g, &mut grads);
        }
        Ok(out)
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn backward_op(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = dims(self.value(*a));
                let n = self.value(*b).shape()[1];
                if self.wants(*a) {
                    let da = slot(grads, self, *a);
                    gemm(m, n, k, g, false, self.value(*b).data(), true, da, 1.0);
                }
                if self.wants(*b) {
                    let db = slot(grads, self, *b);
                    gemm(k, m, n, self.value(*a).data(), true, g, false, db, 1.0);
                }
            }
            Op::MatMulNt { a, b } => {
                let (m, k) = dims(self.value(*a));
                let n = self.value(*b).shape()[0];
                if self.wants(*a) {
                    let da = slot(grads, self, *a);
                    gemm(m, n, k, g, false, self.value(*b).data(), false, da, 1.0);
                }
                if self.wants(*b) {
                    let db = slot(grads, self, *b);
                    gemm(n, m, k, g, true, self.value(*a).data(), false, db, 1.0);
                }
            }
            Op::Linear { x, w, b } => {
                let (n, i) = dims(self.value(*x));
                let o = self.value(*w).shape()[1];
                if self.wants(*x) {
                    let dx = slot(grads, self, *x);
                    gemm(n, o, i, g, false, self.value(*w).data(), true, dx, 1.0);
                }
                if self.wants(*w) {
                    let dw = slot(grads, self, *w);
                    gemm(i, n, o, self.value(*x).data(), true, g, false, dw, 1.0);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let db = slot(grads, self, *b);
                        for row in g.chunks(o) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for (input, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if self.wants(input) {
                        axpy(slot(grads, self, input), sign, g);
                    }
                }
            }
            Op::Sub { a, b } => {
                for (input, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if self.wants(input) {
                        axpy(slot(grads, self, input), sign, g);
                    }
                }
            }
            Op::Mul { a, b } => {
                for (input, other) in [(*a, *b), (*b, *a)] {
                    if self.wants(input) {
                        let ov = self.value(other).data();
                        let d = slot(grads, self, input);
                        for ((d, gv), o) in d.iter_mut().zip(g).zip(ov) {
                            *d += gv * o;
                        }
                    }
                }
            }
            Op::Scale { x, factor } => {
                if self.wants(*x) {
                    axpy(slot(grads, self, *x), *factor, g);
                }
            }
            Op::MulExp { x, s } => {
                let factor = self.value(*s).item().exp();
                if self.wants(*x) {
                    axpy(slot(grads, self, *x), factor, g);
                }
                if self.wants(*s) {
                    let ds: f64 = g.iter().zip(out.data()).map(|(a, b)| a * b).sum();
                    slot(grads, self, *s)[0] += ds;
                }
            }
            Op::Transpose { x } => {
                if self.wants(*x) {
                    let (r, c) = dims(self.value(*x));
                    let dx = slot(grads, self, *x);
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = out.width();
                let rows = out.rows();
                if self.wants(*gamma) {
                    let dg = slot(grads, self, *gamma);
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if self.wants(*beta) {
                    let db = slot(grads, self, *beta);
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                }
                if self.wants(*x) {
                    let gam = self.value(*gamma).data();
                    let dx = slot(grads, self, *x);
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let (mut m1, mut m2) = (0.0, 0.0);
                        for j in 0..d {
                            let v = g[r * d + j] * gam[j];
                            dxhat[j] = v;
                            m1 += v;
                            m2 += v * xhat[r * d + j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            dx[r * d + j] += rstd[r] * (dxhat[j] - m1 - xhat[r * d + j] * m2);
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                if self.wants(*x) {
                    let xv = self.value(*x).data();
                    let dx = slot(grads, self, *x);
                    for ((d, gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                        *d += gv * gelu_grad(v);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if self.wants(*x) {
                    let dx = slot(grads, self, *x);
                    for ((d, gv), m) in dx.iter_mut().zip(g).zip(mask) {
                        *d += gv * m;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, segments, probs, g, grads),
            Op::GatherRows { sources, index } => {
                let w = out.width();
                for (r, &(src, row)) in index.iter().enumerate() {
                    let s = sources[src];
                    if self.wants(s) {
                        let ds = slot(grads, self, s);
                        axpy(&mut ds[row * w..(row + 1) * w], 1.0, &g[r * w..(r + 1) * w]);
                    }
                }
            }
            Op::SegmentMean { x, segments } => {
                if self.wants(*x) {
                    let d = out.width();
                    let dx = slot(grads, self, *x);
                    let mut offset = 0;
                    for (s, &len) in segments.iter().enumerate() {
                        let gs = &g[s * d..(s + 1) * d];
                        for r in offset..offset + len {
                            axpy(&mut dx[r * d..(r + 1) * d], 1.0 / len as f64, gs);
                        }
                        offset += len;
                    }
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                if self.wants(*x) {
                    let d = out.width();
                    let dx = slot(grads, self, *x);
                    for (r, norm) in norms.iter().enumerate() {
                        let y = out.row(r);
                        let gr = &g[r * d..(r + 1) * d];
                        let proj = dot(y, gr);
                        for j in 0..d {
                            dx[r * d + j] += (gr[j] - y[j] * proj) / norm;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if self.wants(*logits) {
                    let n = targets.len();
                    let c = probs.len() / n;
                    let scale = g[0] / n as f64;
                    let dl = slot(grads, self, *logits);
                    for r in 0..n {
                        for j in 0..c {
                            let onehot = if j == targets[r] { 1.0 } else { 0.0 };
                            dl[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::Mse { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let scale = 2.0 * g[0] / va.len() as f64;
                for (input, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if self.wants(input) {
                        let d = slot(grads, self, input);
                        for ((d, x), y) in d.iter_mut().zip(va).zip(vb) {
                            *d += sign * scale * (x - y);
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if self.wants(*x) {
                    slot(grads, self, *x).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean { x } => {
                if self.wants(*x) {
                    let dx = slot(grads, self, *x);
                    let v = g[0] / dx.len() as f64;
                    dx.iter_mut().for_each(|d| *d += v);
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
        segments: &[usize],
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (n, d) = dims(self.value(q));
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut offset = 0;
        let mut pbase = 0;
        let mut ds = Vec::new();
        for &t in segments {
            for h in 0..heads {
                let col = h * dh;
                let p = &probs[pbase..pbase + t * t];
                pbase += t * t;
                ds.clear();
                ds.resize(t * t, 0.0);
                for i in 0..t {
                    let gi = &g[(offset + i) * d + col..(offset + i) * d + col + dh];
                    // dP_ij = g_i . v_j ; dS = P * (dP - sum_j P dP)
                    let mut acc = 0.0;
                    for j in 0..t {
                        let pij = p[i * t + j];
                        if pij == 0.0 {
                            continue;
                        }
                        let vj = &vv[(offset + j) * d + col..(offset + j) * d + col + dh];
                        let dp = dot(gi, vj);
                        ds[i * t + j] = dp;
                        acc += pij * dp;
                        let dvj = &mut dv[(offset + j) * d + col..(offset + j) * d + col + dh];
                        axpy(dvj, pij, gi);
                    }
                    for j in 0..t {
                        ds[i * t + j] = p[i * t + j] * (ds[i * t + j] - acc) * scale;
                    }
                }
                for i in 0..t {
                    for j in 0..t {
                        let s = ds[i * t + j];
                        if s == 0.0 {
                            continue;
                        }
                        let (ri, rj) = ((offset + i) * d + col, (offset + j) * d + col);
                        for c in 0..dh {
                            dq[ri + c] += s * kv[rj + c];
                            dk[rj + c] += s * qv[ri + c];
                        }
                    }
                }
            }
            offset += t;
        }
        for (input, delta) in [(q, dq), (k, dk), (v, dv)] {
            if self.wants(input) {
                axpy(slot(grads, self, input), 1.0, &delta);
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], graph: &Graph, id: NodeId) -> &'a mut [f64] {
    let len = graph.value(id).len();
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.shape()[0], t.shape()[1])
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

fn gelu_grad(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    normal_cdf(x) + x * pdf
}
