//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! The op set is the minimum needed to train a small encoder-decoder
//! transformer: matmul, elementwise add/mul, bias add, relu, layer norm,
//! softmax, embedding lookup and a padding-aware cross entropy. Values are
//! row-major `f64`; evaluation order is fixed, so forward results are
//! bit-identical across runs for identical inputs.

use crate::error::{Error, Result};

/// Dense n-dimensional value. `data.len()` always equals the product of
/// `shape` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "tensor shape {:?} incompatible with {} data elements",
                shape,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Rows/cols of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::InvalidArgument(format!(
                "expected rank-2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Surfaces NaN/Inf as an error state.
    pub fn validate_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }
}

// --- raw matmul kernels ----------------------------------------------------

/// out[m,n] = a[m,k] · b[k,n]
fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,q] = a[m,p] · b[q,p]ᵀ
fn mm_nt(a: &[f64], b: &[f64], m: usize, p: usize, q: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * p..(i + 1) * p];
        for j in 0..q {
            let brow = &b[j * p..(j + 1) * p];
            let mut acc = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * q + j] += acc;
        }
    }
}

/// out[m,n] = a[p,m]ᵀ · b[p,n]
fn mm_tn(a: &[f64], b: &[f64], p: usize, m: usize, n: usize, out: &mut [f64]) {
    for i in 0..p {
        let arow = &a[i * m..(i + 1) * m];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// --- tape ------------------------------------------------------------------

pub type NodeId = usize;

enum Op {
    Leaf,
    Const,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Transpose(NodeId),
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<NodeId>),
    Sum(NodeId),
    Softmax {
        x: NodeId,
        axis: usize,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        pad_id: usize,
        probs: Vec<f64>,
        counted: usize,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Topologically ordered record of executed ops. Backward visits each node
/// exactly once in reverse order; gradients accumulate additively across
/// fan-out.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.nodes.len() - 1
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Gradient of the last backward() loss w.r.t. node `id`, if any flowed.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Trainable leaf (participates in backward).
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(t, true, Op::Leaf)
    }

    /// Non-trainable input (positional encodings, attention masks, mask
    /// multipliers).
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, false, Op::Const)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape.clone(),
                rhs: self.value(b).shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        mm_nn(&self.value(a).data, &self.value(b).data, m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::Matmul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape != self.value(b).shape {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.value(a).shape.clone(),
                rhs: self.value(b).shape.clone(),
            });
        }
        let data: Vec<f64> = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape.clone(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, rg, Op::Add(a, b)))
    }

    /// x[r,c] + bias[c], broadcast over rows (the only broadcast supported).
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2()?;
        if self.value(bias).shape != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: self.value(x).shape.clone(),
                rhs: self.value(bias).shape.clone(),
            });
        }
        let mut data = self.value(x).data.clone();
        let b = &self.nodes[bias].value.data;
        for row in data.chunks_mut(c) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::new(vec![r, c], data)?, rg, Op::AddBias(x, bias)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape != self.value(b).shape {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.value(a).shape.clone(),
                rhs: self.value(b).shape.clone(),
            });
        }
        let data: Vec<f64> = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape.clone(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let data: Vec<f64> = self.value(x).data.iter().map(|v| v * c).collect();
        let t = Tensor {
            shape: self.value(x).shape.clone(),
            data,
        };
        let rg = self.rg(x);
        self.push(t, rg, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f64> = self.value(x).data.iter().map(|v| v.max(0.0)).collect();
        let t = Tensor {
            shape: self.value(x).shape.clone(),
            data,
        };
        let rg = self.rg(x);
        self.push(t, rg, Op::Relu(x))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2()?;
        let src = &self.nodes[x].value.data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![c, r], data)?, rg, Op::Transpose(x)))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2()?;
        if start + len > c {
            return Err(Error::InvalidArgument(format!(
                "slice_cols [{start}, {}) out of {c} columns",
                start + len
            )));
        }
        let src = &self.nodes[x].value.data;
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![r, len], data)?,
            rg,
            Op::SliceCols { x, start, len },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_cols of zero parts".into()));
        }
        let (r, _) = self.value(parts[0]).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pr != r {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape.clone(),
                    rhs: self.value(p).shape.clone(),
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = &self.nodes[p].value.data;
                data.extend_from_slice(&src[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(vec![r, total], data)?,
            rg,
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data.iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    /// Row-stable softmax along `axis` of a rank-2 tensor.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2()?;
        if axis > 1 {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {axis} out of range for rank-2 tensor"
            )));
        }
        let src = &self.nodes[x].value.data;
        let mut data = vec![0.0; r * c];
        let (slices, slice_len, stride, base_stride) = if axis == 1 {
            (r, c, 1usize, c)
        } else {
            (c, r, c, 1usize)
        };
        for s in 0..slices {
            let base = s * base_stride;
            let mut mx = f64::NEG_INFINITY;
            for i in 0..slice_len {
                mx = mx.max(src[base + i * stride]);
            }
            let mut z = 0.0;
            for i in 0..slice_len {
                let e = (src[base + i * stride] - mx).exp();
                data[base + i * stride] = e;
                z += e;
            }
            for i in 0..slice_len {
                data[base + i * stride] /= z;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![r, c], data)?, rg, Op::Softmax { x, axis }))
    }

    /// Layer norm over the last axis of x[r,c] with per-feature gain/bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2()?;
        if self.value(gain).shape != [c] || self.value(bias).shape != [c] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.value(x).shape.clone(),
                rhs: self.value(gain).shape.clone(),
            });
        }
        let src = &self.nodes[x].value.data;
        let g = &self.nodes[gain].value.data;
        let b = &self.nodes[bias].value.data;
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let xh = (row[j] - mean) * is;
                xhat[i * c + j] = xh;
                data[i * c + j] = xh * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(vec![r, c], data)?,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Gather rows of `table` by token id.
    pub fn embedding_lookup(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, d) = self.value(table).dims2()?;
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} out of vocabulary {v}"
            )));
        }
        let src = &self.nodes[table].value.data;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], data)?,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean negative log-likelihood over non-pad target positions.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        pad_id: usize,
    ) -> Result<NodeId> {
        let (t, v) = self.value(logits).dims2()?;
        if targets.len() != t {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: self.value(logits).shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
            return Err(Error::InvalidArgument(format!(
                "target id {bad} out of vocabulary {v}"
            )));
        }
        let src = &self.nodes[logits].value.data;
        let mut probs = vec![0.0; t * v];
        let mut loss = 0.0;
        let mut counted = 0usize;
        for i in 0..t {
            let row = &src[i * v..(i + 1) * v];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..v {
                let e = (row[j] - mx).exp();
                probs[i * v + j] = e;
                z += e;
            }
            for j in 0..v {
                probs[i * v + j] /= z;
            }
            if targets[i] != pad_id {
                loss -= probs[i * v + targets[i]].ln();
                counted += 1;
            }
        }
        if counted == 0 {
            return Err(Error::InvalidArgument(
                "cross_entropy: no non-padded targets".into(),
            ));
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss / counted as f64),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad_id,
                probs,
                counted,
            },
        ))
    }

    fn accumulate(&mut self, id: NodeId, g: Tensor) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut self.grads[id] {
            Some(existing) => {
                for (e, v) in existing.data.iter_mut().zip(&g.data) {
                    *e += v;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Populate gradients of `loss` w.r.t. every requires_grad node.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.nodes.is_empty() {
            return Err(Error::InvalidArgument("backward on empty graph".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape
            )));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss] = Some(Tensor::scalar(1.0));

        for id in (0..=loss).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(upstream) = self.grads[id].take() else {
                continue;
            };
            self.propagate(id, &upstream);
            self.grads[id] = Some(upstream);
        }
        Ok(())
    }

    fn propagate(&mut self, id: NodeId, up: &Tensor) {
        match &self.nodes[id].op {
            Op::Leaf | Op::Const => {}
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = self.value(a).dims2().unwrap();
                let (_, n) = self.value(b).dims2().unwrap();
                if self.rg(a) {
                    let mut da = vec![0.0; m * k];
                    mm_nt(&up.data, &self.nodes[b].value.data, m, n, k, &mut da);
                    self.accumulate(a, Tensor::new(vec![m, k], da).unwrap());
                }
                if self.rg(b) {
                    let mut db = vec![0.0; k * n];
                    mm_tn(&self.nodes[a].value.data, &up.data, m, k, n, &mut db);
                    self.accumulate(b, Tensor::new(vec![k, n], db).unwrap());
                }
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    self.accumulate(a, up.clone());
                }
                if self.rg(b) {
                    self.accumulate(b, up.clone());
                }
            }
            Op::AddBias(x, bias) => {
                let (x, bias) = (*x, *bias);
                if self.rg(x) {
                    self.accumulate(x, up.clone());
                }
                if self.rg(bias) {
                    let c = self.value(bias).len();
                    let mut db = vec![0.0; c];
                    for row in up.data.chunks(c) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(bias, Tensor::new(vec![c], db).unwrap());
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    let da: Vec<f64> = up
                        .data
                        .iter()
                        .zip(&self.nodes[b].value.data)
                        .map(|(u, v)| u * v)
                        .collect();
                    let sh = self.value(a).shape.clone();
                    self.accumulate(a, Tensor::new(sh, da).unwrap());
                }
                if self.rg(b) {
                    let db: Vec<f64> = up
                        .data
                        .iter()
                        .zip(&self.nodes[a].value.data)
                        .map(|(u, v)| u * v)
                        .collect();
                    let sh = self.value(b).shape.clone();
                    self.accumulate(b, Tensor::new(sh, db).unwrap());
                }
            }
            Op::Scale(x, c) => {
                let (x, c) = (*x, *c);
                let dx: Vec<f64> = up.data.iter().map(|u| u * c).collect();
                let sh = self.value(x).shape.clone();
                self.accumulate(x, Tensor::new(sh, dx).unwrap());
            }
            Op::Relu(x) => {
                let x = *x;
                let dx: Vec<f64> = up
                    .data
                    .iter()
                    .zip(&self.nodes[x].value.data)
                    .map(|(u, v)| if *v > 0.0 { *u } else { 0.0 })
                    .collect();
                let sh = self.value(x).shape.clone();
                self.accumulate(x, Tensor::new(sh, dx).unwrap());
            }
            Op::Transpose(x) => {
                let x = *x;
                let (r, c) = self.value(x).dims2().unwrap();
                // up is [c, r]
                let mut dx = vec![0.0; r * c];
                for i in 0..c {
                    for j in 0..r {
                        dx[j * c + i] = up.data[i * r + j];
                    }
                }
                self.accumulate(x, Tensor::new(vec![r, c], dx).unwrap());
            }
            Op::SliceCols { x, start, len } => {
                let (x, start, len) = (*x, *start, *len);
                let (r, c) = self.value(x).dims2().unwrap();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len]
                        .copy_from_slice(&up.data[i * len..(i + 1) * len]);
                }
                self.accumulate(x, Tensor::new(vec![r, c], dx).unwrap());
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let r = self.value(parts[0]).dims2().unwrap().0;
                let total: usize = up.data.len() / r;
                let mut offset = 0usize;
                for p in parts {
                    let (_, w) = self.value(p).dims2().unwrap();
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(r * w);
                        for i in 0..r {
                            dp.extend_from_slice(&up.data[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(p, Tensor::new(vec![r, w], dp).unwrap());
                    }
                    offset += w;
                }
            }
            Op::Sum(x) => {
                let x = *x;
                let u = up.item();
                let sh = self.value(x).shape.clone();
                let n: usize = sh.iter().product();
                self.accumulate(x, Tensor::new(sh, vec![u; n]).unwrap());
            }
            Op::Softmax { x, axis } => {
                let (x, axis) = (*x, *axis);
                let (r, c) = self.value(x).dims2().unwrap();
                let y = &self.nodes[id].value.data;
                let mut dx = vec![0.0; r * c];
                let (slices, slice_len, stride, base_stride) = if axis == 1 {
                    (r, c, 1usize, c)
                } else {
                    (c, r, c, 1usize)
                };
                for s in 0..slices {
                    let base = s * base_stride;
                    let mut dot = 0.0;
                    for i in 0..slice_len {
                        let idx = base + i * stride;
                        dot += up.data[idx] * y[idx];
                    }
                    for i in 0..slice_len {
                        let idx = base + i * stride;
                        dx[idx] = y[idx] * (up.data[idx] - dot);
                    }
                }
                self.accumulate(x, Tensor::new(vec![r, c], dx).unwrap());
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let xhat = xhat.clone();
                let inv_std = inv_std.clone();
                let (r, c) = self.value(x).dims2().unwrap();
                let g = self.nodes[gain].value.data.clone();
                if self.rg(x) {
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..c {
                            let dxh = up.data[i * c + j] * g[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xhat[i * c + j];
                        }
                        mean_dxh /= c as f64;
                        mean_dxh_xh /= c as f64;
                        for j in 0..c {
                            let dxh = up.data[i * c + j] * g[j];
                            dx[i * c + j] =
                                inv_std[i] * (dxh - mean_dxh - xhat[i * c + j] * mean_dxh_xh);
                        }
                    }
                    self.accumulate(x, Tensor::new(vec![r, c], dx).unwrap());
                }
                if self.rg(gain) {
                    let mut dg = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            dg[j] += up.data[i * c + j] * xhat[i * c + j];
                        }
                    }
                    self.accumulate(gain, Tensor::new(vec![c], dg).unwrap());
                }
                if self.rg(bias) {
                    let mut db = vec![0.0; c];
                    for row in up.data.chunks(c) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(bias, Tensor::new(vec![c], db).unwrap());
                }
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                let (v, d) = self.value(table).dims2().unwrap();
                let mut dt = vec![0.0; v * d];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += up.data[row * d + j];
                    }
                }
                self.accumulate(table, Tensor::new(vec![v, d], dt).unwrap());
            }
            Op::CrossEntropy {
                logits,
                targets,
                pad_id,
                probs,
                counted,
            } => {
                let logits = *logits;
                let targets = targets.clone();
                let pad_id = *pad_id;
                let probs = probs.clone();
                let counted = *counted as f64;
                let (t, v) = self.value(logits).dims2().unwrap();
                let u = up.item();
                let mut dl = vec![0.0; t * v];
                for i in 0..t {
                    if targets[i] == pad_id {
                        continue;
                    }
                    for j in 0..v {
                        let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                        dl[i * v + j] = u * (probs[i * v + j] - onehot) / counted;
                    }
                }
                self.accumulate(logits, Tensor::new(vec![t, v], dl).unwrap());
            }
        }
    }
}

/// Max over components of |analytic − numeric| / max(1, |analytic|), where
/// numeric is a central finite difference with step `h`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let y = f(&mut tape, xid)?;
    if !tape.value(y).is_scalar() {
        return Err(Error::InvalidArgument(
            "grad_check requires a scalar-valued function".into(),
        ));
    }
    tape.backward(y)?;
    let analytic = tape
        .grad(xid)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(&x.shape));

    let eval = |pt: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let id = t.constant(pt.clone());
        let y = f(&mut t, id)?;
        Ok(t.value(y).item())
    };

    let mut max_err = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data[i] += h;
        let mut minus = x.clone();
        minus.data[i] -= h;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
        let a = analytic.data[i];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_definition() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![1, 3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = t.relu(x);
        assert_eq!(t.value(y).data, vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let eye = Tensor::new(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let x = Tensor::new(vec![3, 2], vec![1.5, -2.0, 0.25, 3.0, -1.0, 0.5]).unwrap();
        let a = t.constant(eye);
        let b = t.constant(x.clone());
        let y = t.matmul(a, b).unwrap();
        assert_eq!(t.value(y).data, x.data);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[4, 2]));
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let v = 7;
        let mut t = Tape::new();
        let logits = t.constant(Tensor::zeros(&[4, v]));
        let loss = t.cross_entropy(logits, &[1, 2, 3, 4], 0).unwrap();
        assert!((t.value(loss).item() - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_all_pad_errors() {
        let mut t = Tape::new();
        let logits = t.constant(Tensor::zeros(&[2, 5]));
        assert!(t.cross_entropy(logits, &[0, 0], 0).is_err());
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap().data, vec![2.0, 4.0]);
    }

    #[test]
    fn backward_sum_relu() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![1, 2], vec![-1.0, 3.0]).unwrap());
        let r = t.relu(x);
        let loss = t.sum(r);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap().data, vec![0.0, 1.0]);
    }

    #[test]
    fn backward_twice_errors() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(2.0));
        let loss = t.sum(x);
        t.backward(loss).unwrap();
        assert!(matches!(t.backward(loss), Err(Error::BackwardTwice)));
    }

    #[test]
    fn backward_non_scalar_errors() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0]).unwrap());
        let y = t.softmax(x, 1).unwrap();
        for row in t.value(y).data.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let y0 = t.softmax(x, 0).unwrap();
        for j in 0..3 {
            let s: f64 = (0..2).map(|i| t.value(y0).data[i * 3 + j]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_check_sum_is_exact() {
        let x = Tensor::new(vec![2, 2], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let err = grad_check(|t, x| Ok(t.sum(x)), &x, 1e-5).unwrap();
        assert!(err < 1e-9, "err = {err}");
    }

    #[test]
    fn grad_check_quadratic_form() {
        // f(x) = sum((x·A) ⊙ (x·A))
        let a = Tensor::new(vec![3, 3], vec![0.5, -1.0, 0.3, 0.2, 0.9, -0.4, 1.1, 0.0, 0.6])
            .unwrap();
        let x = Tensor::new(vec![2, 3], vec![0.7, -0.2, 1.3, -0.8, 0.4, 0.1]).unwrap();
        let err = grad_check(
            |t, x| {
                let ac = t.constant(a.clone());
                let xa = t.matmul(x, ac)?;
                let sq = t.mul(xa, xa)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn grad_check_non_scalar_errors() {
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        assert!(grad_check(|t, x| Ok(t.relu(x)), &x, 1e-5).is_err());
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(x) + sum(x) → grad 2
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap());
        let s1 = t.sum(x);
        let s2 = t.sum(x);
        let loss = t.add(s1, s2).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap().data, vec![2.0, 2.0]);
    }

    #[test]
    fn layer_norm_and_softmax_grads_match_fd() {
        let x = Tensor::new(
            vec![2, 4],
            vec![0.5, -1.1, 0.9, 0.2, -0.3, 1.7, -0.6, 0.4],
        )
        .unwrap();
        let gain = Tensor::new(vec![4], vec![1.1, 0.9, -0.5, 1.3]).unwrap();
        let bias = Tensor::new(vec![4], vec![0.1, -0.2, 0.0, 0.3]).unwrap();
        let err = grad_check(
            |t, x| {
                let g = t.constant(gain.clone());
                let b = t.constant(bias.clone());
                let ln = t.layer_norm(x, g, b)?;
                let sm = t.softmax(ln, 1)?;
                let sq = t.mul(sm, sm)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn forward_bit_identical_across_runs() {
        let run = || {
            let mut t = Tape::new();
            let x = t.constant(
                Tensor::new(vec![2, 3], vec![0.1, 0.22, -0.3, 1.7, -2.2, 0.05]).unwrap(),
            );
            let w = t.constant(
                Tensor::new(vec![3, 2], vec![0.9, -0.1, 0.33, 0.7, -1.4, 0.6]).unwrap(),
            );
            let y = t.matmul(x, w).unwrap();
            let s = t.softmax(y, 1).unwrap();
            t.value(s).data.clone()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
