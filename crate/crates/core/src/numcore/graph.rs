//! Reverse-mode differentiation graph.
//!
//! A [`Graph`] is a tape of topologically ordered operation records: every
//! node's inputs precede it, so one reverse sweep propagates gradients.
//! Graphs are single-writer — one training step owns its graph exclusively
//! and reads gradients off it before the next step builds a fresh one.

use crate::error::{Error, Result};
use crate::numcore::tensor::{numel_of, Tensor};

/// Handle to a node on a [`Graph`]. Only valid for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    AddN(Vec<NodeId>),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddBias(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    GatherRows(NodeId, Vec<usize>),
    Index(NodeId, usize),
    /// Row-wise softmax of `x / temperature`.
    Softmax(NodeId, f64),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    Gelu(NodeId),
    Abs(NodeId),
    /// Elementwise `ln(max(x, floor))`.
    LnClamped(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    CosSim(NodeId, NodeId),
    StackScalars(Vec<NodeId>),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    /// True when this node or any ancestor leaf requires gradients; backward
    /// skips subtrees where it is false (frozen weights stay cheap).
    needs_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Graph {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Copies a tensor onto the graph as a leaf.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(
            t.shape.clone(),
            t.data.clone(),
            t.requires_grad,
            Op::Leaf,
        )
    }

    pub fn leaf_from(
        &mut self,
        shape: &[usize],
        data: Vec<f64>,
        requires_grad: bool,
    ) -> Result<NodeId> {
        if numel_of(shape) != data.len() {
            return Err(Error::Contract(format!(
                "leaf shape {shape:?} implies {} elements, got {}",
                numel_of(shape),
                data.len()
            )));
        }
        Ok(self.push(shape.to_vec(), data, requires_grad, Op::Leaf))
    }

    pub fn constant(&mut self, value: f64) -> NodeId {
        self.push(vec![], vec![value], false, Op::Leaf)
    }

    pub fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    /// Gradient of the last backward target w.r.t. this node, if it received one.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Copies a node out as a tensor (gradient included when present).
    pub fn tensor(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.data.clone(),
            requires_grad: n.needs_grad,
            grad: n.grad.clone(),
        }
    }

    pub fn item(&self, id: NodeId) -> Result<f64> {
        let n = &self.nodes[id.0];
        if n.data.len() == 1 {
            Ok(n.data[0])
        } else {
            Err(Error::Contract(format!(
                "item() on node of shape {:?}",
                n.shape
            )))
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool, op: Op) -> NodeId {
        debug_assert_eq!(numel_of(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            needs_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    fn same_shape(&self, context: &str, a: NodeId, b: NodeId) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::dim(
                context,
                &self.nodes[a.0].shape,
                &self.nodes[b.0].shape,
            ));
        }
        Ok(())
    }

    fn dims2(&self, context: &str, id: NodeId) -> Result<(usize, usize)> {
        match self.nodes[id.0].shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::dim(context, other, &[0, 0])),
        }
    }

    /// Rows/cols view: matrices as-is, vectors as a single row, scalars as 1x1.
    fn rows_cols(&self, id: NodeId) -> (usize, usize) {
        match self.nodes[id.0].shape.as_slice() {
            &[r, c] => (r, c),
            &[n] => (1, n),
            _ => (1, 1),
        }
    }

    // ── Elementwise and arithmetic operations ──────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let data = zip_map(&self.node(a).data, &self.node(b).data, |x, y| x + y);
        let needs = self.needs(&[a, b]);
        Ok(self.push(self.node(a).shape.clone(), data, needs, Op::Add(a, b)))
    }

    /// n-ary sum of same-shaped nodes; backward fans the gradient to each term.
    pub fn add_n(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        let first = *terms
            .first()
            .ok_or_else(|| Error::Contract("add_n of zero terms".into()))?;
        let mut data = self.node(first).data.clone();
        for &t in &terms[1..] {
            self.same_shape("add_n", first, t)?;
            for (o, v) in data.iter_mut().zip(&self.node(t).data) {
                *o += v;
            }
        }
        let needs = self.needs(terms);
        Ok(self.push(
            self.node(first).shape.clone(),
            data,
            needs,
            Op::AddN(terms.to_vec()),
        ))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(&self.node(a).data, &self.node(b).data, |x, y| x - y);
        let needs = self.needs(&[a, b]);
        Ok(self.push(self.node(a).shape.clone(), data, needs, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(&self.node(a).data, &self.node(b).data, |x, y| x * y);
        let needs = self.needs(&[a, b]);
        Ok(self.push(self.node(a).shape.clone(), data, needs, Op::Mul(a, b)))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let data = self.node(a).data.iter().map(|x| -x).collect();
        let needs = self.node(a).needs_grad;
        self.push(self.node(a).shape.clone(), data, needs, Op::Neg(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = self.node(a).data.iter().map(|x| c * x).collect();
        let needs = self.node(a).needs_grad;
        self.push(self.node(a).shape.clone(), data, needs, Op::Scale(a, c))
    }

    /// Adds a length-c vector to every row of an r x c matrix.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2("add_bias", x)?;
        if self.node(bias).shape != [c] {
            return Err(Error::dim("add_bias", &[r, c], &self.node(bias).shape));
        }
        let bv = &self.node(bias).data;
        let mut data = self.node(x).data.clone();
        for row in data.chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(bv) {
                *o += b;
            }
        }
        let needs = self.needs(&[x, bias]);
        Ok(self.push(vec![r, c], data, needs, Op::AddBias(x, bias)))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let data = self.node(a).data.iter().map(|x| x.abs()).collect();
        let needs = self.node(a).needs_grad;
        self.push(self.node(a).shape.clone(), data, needs, Op::Abs(a))
    }

    /// Elementwise `ln(max(x, floor))`. Also reports whether any element was
    /// clamped, so callers can raise a numeric warning.
    pub fn ln_clamped(&mut self, a: NodeId, floor: f64) -> (NodeId, bool) {
        let clamped = self.node(a).data.iter().any(|&x| x < floor);
        let data = self.node(a).data.iter().map(|x| x.max(floor).ln()).collect();
        let needs = self.node(a).needs_grad;
        let id = self.push(
            self.node(a).shape.clone(),
            data,
            needs,
            Op::LnClamped(a, floor),
        );
        (id, clamped)
    }

    // ── Matrix operations ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (p, q) = self.dims2("matmul", a)?;
        let (q2, r) = self.dims2("matmul", b)?;
        if q != q2 {
            return Err(Error::dim("matmul", &[p, q], &[q2, r]));
        }
        let mut data = vec![0.0; p * r];
        matmul_acc(&self.node(a).data, &self.node(b).data, p, q, r, &mut data);
        let needs = self.needs(&[a, b]);
        Ok(self.push(vec![p, r], data, needs, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2("transpose", a)?;
        let src = &self.node(a).data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let needs = self.node(a).needs_grad;
        Ok(self.push(vec![c, r], data, needs, Op::Transpose(a)))
    }

    /// Vertically stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of zero parts".into()))?;
        let (_, c) = self.dims2("concat_rows", first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pr, pc) = self.dims2("concat_rows", p)?;
            if pc != c {
                return Err(Error::dim("concat_rows", &[pr, pc], &[rows, c]));
            }
            rows += pr;
            data.extend_from_slice(&self.node(p).data);
        }
        let needs = self.needs(parts);
        Ok(self.push(vec![rows, c], data, needs, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.dims2("slice_rows", x)?;
        if start + len > r {
            return Err(Error::Contract(format!(
                "slice_rows {start}..{} out of {r} rows",
                start + len
            )));
        }
        let data = self.node(x).data[start * c..(start + len) * c].to_vec();
        let needs = self.node(x).needs_grad;
        Ok(self.push(vec![len, c], data, needs, Op::SliceRows(x, start)))
    }

    /// Extracts one row as a vector.
    pub fn row(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let (r, c) = self.dims2("row", x)?;
        if index >= r {
            return Err(Error::Contract(format!("row {index} out of {r}")));
        }
        let sliced = self.slice_rows(x, index, 1)?;
        let data = self.node(sliced).data.clone();
        let needs = self.node(sliced).needs_grad;
        // Reshape [1, c] -> [c]; gradient routing reuses the slice node.
        Ok(self.push(vec![c], data, needs, Op::Scale(sliced, 1.0)))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.dims2("slice_cols", x)?;
        if start + len > c {
            return Err(Error::Contract(format!(
                "slice_cols {start}..{} out of {c} cols",
                start + len
            )));
        }
        let src = &self.node(x).data;
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let needs = self.node(x).needs_grad;
        Ok(self.push(vec![r, len], data, needs, Op::SliceCols(x, start)))
    }

    /// Horizontally concatenates matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of zero parts".into()))?;
        let (r, _) = self.dims2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.dims2("concat_cols", p)?;
            if pr != r {
                return Err(Error::dim("concat_cols", &[pr, pc], &[r, total]));
            }
            widths.push(pc);
            total += pc;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.node(p).data[i * w..(i + 1) * w]);
            }
        }
        let needs = self.needs(parts);
        Ok(self.push(vec![r, total], data, needs, Op::ConcatCols(parts.to_vec())))
    }

    /// Selects rows of a matrix by index (embedding lookup). Duplicate
    /// indices accumulate gradient additively.
    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (r, c) = self.dims2("gather_rows", table)?;
        let src = &self.node(table).data;
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(Error::Contract(format!("gather_rows index {i} out of {r}")));
            }
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let needs = self.node(table).needs_grad;
        Ok(self.push(
            vec![indices.len(), c],
            data,
            needs,
            Op::GatherRows(table, indices.to_vec()),
        ))
    }

    /// Picks one element of a vector as a scalar.
    pub fn index(&mut self, v: NodeId, i: usize) -> Result<NodeId> {
        let n = self.node(v).data.len();
        if self.node(v).shape.len() > 1 {
            return Err(Error::Contract(format!(
                "index expects a vector, got shape {:?}",
                self.node(v).shape
            )));
        }
        if i >= n {
            return Err(Error::Contract(format!("index {i} out of {n}")));
        }
        let data = vec![self.node(v).data[i]];
        let needs = self.node(v).needs_grad;
        Ok(self.push(vec![], data, needs, Op::Index(v, i)))
    }

    /// Stacks scalars into a vector.
    pub fn stack_scalars(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("stack_scalars of zero parts".into()));
        }
        let mut data = Vec::with_capacity(parts.len());
        for &p in parts {
            if self.node(p).data.len() != 1 {
                return Err(Error::Contract(format!(
                    "stack_scalars expects scalars, got shape {:?}",
                    self.node(p).shape
                )));
            }
            data.push(self.node(p).data[0]);
        }
        let needs = self.needs(parts);
        Ok(self.push(
            vec![parts.len()],
            data,
            needs,
            Op::StackScalars(parts.to_vec()),
        ))
    }

    // ── Neural primitives ──────────────────────────────────────────────────

    /// Softmax of `x / temperature`, numerically stabilized by max
    /// subtraction. Vectors are one distribution; matrices are normalized
    /// row-wise.
    pub fn softmax(&mut self, x: NodeId, temperature: f64) -> Result<NodeId> {
        if !(temperature > 0.0) {
            return Err(Error::Numeric(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        if self.node(x).data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax input contains NaN/inf".into()));
        }
        let (_, cols) = self.rows_cols(x);
        let mut data = self.node(x).data.clone();
        for row in data.chunks_mut(cols) {
            softmax_row(row, temperature);
        }
        let needs = self.node(x).needs_grad;
        Ok(self.push(
            self.node(x).shape.clone(),
            data,
            needs,
            Op::Softmax(x, temperature),
        ))
    }

    /// `(x - mean) / sqrt(var + eps) * gain + bias`, normalizing each row
    /// (the full vector for rank-1 input) over its last axis.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        if !(eps > 0.0) {
            return Err(Error::Numeric(format!("layer_norm eps must be positive, got {eps}")));
        }
        let (_, cols) = self.rows_cols(x);
        if self.node(gain).shape != [cols] {
            return Err(Error::dim("layer_norm gain", &self.node(x).shape, &self.node(gain).shape));
        }
        if self.node(bias).shape != [cols] {
            return Err(Error::dim("layer_norm bias", &self.node(x).shape, &self.node(bias).shape));
        }
        let g = self.node(gain).data.clone();
        let b = self.node(bias).data.clone();
        let mut data = self.node(x).data.clone();
        for row in data.chunks_mut(cols) {
            let (mean, inv) = row_norm_stats(row, eps);
            for (v, (gv, bv)) in row.iter_mut().zip(g.iter().zip(&b)) {
                *v = (*v - mean) * inv * gv + bv;
            }
        }
        let needs = self.needs(&[x, gain, bias]);
        Ok(self.push(
            self.node(x).shape.clone(),
            data,
            needs,
            Op::LayerNorm { x, gain, bias, eps },
        ))
    }

    /// Exact Gaussian-CDF GELU: `x * Phi(x)`.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        if self.node(x).data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("gelu input contains NaN/inf".into()));
        }
        let data = self.node(x).data.iter().map(|&v| v * normal_cdf(v)).collect();
        let needs = self.node(x).needs_grad;
        Ok(self.push(self.node(x).shape.clone(), data, needs, Op::Gelu(x)))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let data = vec![self.node(x).data.iter().sum()];
        let needs = self.node(x).needs_grad;
        self.push(vec![], data, needs, Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.node(x).data.len() as f64;
        let data = vec![self.node(x).data.iter().sum::<f64>() / n];
        let needs = self.node(x).needs_grad;
        self.push(vec![], data, needs, Op::Mean(x))
    }

    /// Cosine similarity of two equal-length vectors. Zero-norm inputs are a
    /// degenerate-vector error, never a silent 0.
    pub fn cos_sim(&mut self, u: NodeId, v: NodeId) -> Result<NodeId> {
        self.same_shape("cos_sim", u, v)?;
        let (nu, nv) = (norm(&self.node(u).data), norm(&self.node(v).data));
        if nu == 0.0 || nv == 0.0 {
            return Err(Error::Degenerate(format!(
                "cosine similarity of zero-norm vector (|u|={nu}, |v|={nv})"
            )));
        }
        let dot = dot(&self.node(u).data, &self.node(v).data);
        let needs = self.needs(&[u, v]);
        Ok(self.push(vec![], vec![dot / (nu * nv)], needs, Op::CosSim(u, v)))
    }

    // ── Backward ───────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates `grad` on every
    /// gradient-requiring ancestor; fan-out accumulates additively. Any
    /// gradients from a previous sweep on this graph are cleared first.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.node(loss).data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward on non-scalar of shape {:?}",
                self.node(loss).shape
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = self.nodes[i].grad.take().unwrap();
            let op = self.nodes[i].op.clone();
            self.propagate(i, &op, &g);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    /// Moves a node's gradient buffer out (allocating zeros on first touch)
    /// so it can be accumulated into while other nodes are read.
    fn grad_buf(&mut self, id: NodeId) -> Vec<f64> {
        let n = &mut self.nodes[id.0];
        n.grad
            .take()
            .unwrap_or_else(|| vec![0.0; n.data.len()])
    }

    fn put_grad(&mut self, id: NodeId, buf: Vec<f64>) {
        self.nodes[id.0].grad = Some(buf);
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn acc_scaled(&mut self, id: NodeId, g: &[f64], c: f64) {
        if !self.wants(id) {
            return;
        }
        let mut buf = self.grad_buf(id);
        for (o, v) in buf.iter_mut().zip(g) {
            *o += c * v;
        }
        self.put_grad(id, buf);
    }

    fn propagate(&mut self, out_index: usize, op: &Op, g: &[f64]) {
        let out = NodeId(out_index);
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_scaled(a, g, 1.0);
                self.acc_scaled(b, g, 1.0);
            }
            Op::AddN(ref terms) => {
                for &t in terms {
                    self.acc_scaled(t, g, 1.0);
                }
            }
            Op::Sub(a, b) => {
                self.acc_scaled(a, g, 1.0);
                self.acc_scaled(b, g, -1.0);
            }
            Op::Mul(a, b) => {
                if self.wants(a) {
                    let mut buf = self.grad_buf(a);
                    for ((o, gv), bv) in buf.iter_mut().zip(g).zip(&self.nodes[b.0].data) {
                        *o += gv * bv;
                    }
                    self.put_grad(a, buf);
                }
                if self.wants(b) {
                    let mut buf = self.grad_buf(b);
                    for ((o, gv), av) in buf.iter_mut().zip(g).zip(&self.nodes[a.0].data) {
                        *o += gv * av;
                    }
                    self.put_grad(b, buf);
                }
            }
            Op::Neg(a) => self.acc_scaled(a, g, -1.0),
            Op::Scale(a, c) => self.acc_scaled(a, g, c),
            Op::AddBias(x, bias) => {
                self.acc_scaled(x, g, 1.0);
                if self.wants(bias) {
                    let c = self.nodes[bias.0].data.len();
                    let mut buf = self.grad_buf(bias);
                    for row in g.chunks(c) {
                        for (o, v) in buf.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    self.put_grad(bias, buf);
                }
            }
            Op::MatMul(a, b) => {
                let (p, q) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let r = self.nodes[b.0].shape[1];
                if self.wants(a) {
                    let mut buf = self.grad_buf(a);
                    matmul_nt_acc(g, &self.nodes[b.0].data, p, r, q, &mut buf);
                    self.put_grad(a, buf);
                }
                if self.wants(b) {
                    let mut buf = self.grad_buf(b);
                    matmul_tn_acc(&self.nodes[a.0].data, g, p, q, r, &mut buf);
                    self.put_grad(b, buf);
                }
            }
            Op::Transpose(a) => {
                if self.wants(a) {
                    let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let mut buf = self.grad_buf(a);
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                    self.put_grad(a, buf);
                }
            }
            Op::ConcatRows(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].data.len();
                    if self.wants(p) {
                        let mut buf = self.grad_buf(p);
                        for (o, v) in buf.iter_mut().zip(&g[offset..offset + len]) {
                            *o += v;
                        }
                        self.put_grad(p, buf);
                    }
                    offset += len;
                }
            }
            Op::SliceRows(x, start) => {
                if self.wants(x) {
                    let c = self.nodes[x.0].shape[1];
                    let mut buf = self.grad_buf(x);
                    for (o, v) in buf[start * c..start * c + g.len()].iter_mut().zip(g) {
                        *o += v;
                    }
                    self.put_grad(x, buf);
                }
            }
            Op::SliceCols(x, start) => {
                if self.wants(x) {
                    let (r, c) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                    let w = self.nodes[out.0].shape[1];
                    let mut buf = self.grad_buf(x);
                    for i in 0..r {
                        for j in 0..w {
                            buf[i * c + start + j] += g[i * w + j];
                        }
                    }
                    self.put_grad(x, buf);
                }
            }
            Op::ConcatCols(ref parts) => {
                let r = self.nodes[out.0].shape[0];
                let total = self.nodes[out.0].shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].shape[1];
                    if self.wants(p) {
                        let mut buf = self.grad_buf(p);
                        for i in 0..r {
                            for j in 0..w {
                                buf[i * w + j] += g[i * total + offset + j];
                            }
                        }
                        self.put_grad(p, buf);
                    }
                    offset += w;
                }
            }
            Op::GatherRows(table, ref indices) => {
                if self.wants(table) {
                    let c = self.nodes[table.0].shape[1];
                    let mut buf = self.grad_buf(table);
                    for (k, &i) in indices.iter().enumerate() {
                        for (o, v) in buf[i * c..(i + 1) * c].iter_mut().zip(&g[k * c..(k + 1) * c])
                        {
                            *o += v;
                        }
                    }
                    self.put_grad(table, buf);
                }
            }
            Op::Index(v, i) => {
                if self.wants(v) {
                    let mut buf = self.grad_buf(v);
                    buf[i] += g[0];
                    self.put_grad(v, buf);
                }
            }
            Op::Softmax(x, temp) => {
                if self.wants(x) {
                    let cols = match self.nodes[x.0].shape.as_slice() {
                        &[_, c] => c,
                        &[n] => n,
                        _ => 1,
                    };
                    let mut buf = self.grad_buf(x);
                    let y = &self.nodes[out.0].data;
                    for ((brow, yrow), grow) in
                        buf.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols))
                    {
                        let inner: f64 = yrow.iter().zip(grow).map(|(yv, gv)| yv * gv).sum();
                        for ((o, yv), gv) in brow.iter_mut().zip(yrow).zip(grow) {
                            *o += yv * (gv - inner) / temp;
                        }
                    }
                    self.put_grad(x, buf);
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let cols = match self.nodes[x.0].shape.as_slice() {
                    &[_, c] => c,
                    &[n] => n,
                    _ => 1,
                };
                // Per row: xhat = (x - mean) * inv; with w = g .* gain,
                // dx = inv * (w - mean(w) - xhat * mean(w .* xhat)).
                if self.wants(x) {
                    let mut buf = self.grad_buf(x);
                    let xs = &self.nodes[x.0].data;
                    let gains = &self.nodes[gain.0].data;
                    for ((brow, xrow), grow) in
                        buf.chunks_mut(cols).zip(xs.chunks(cols)).zip(g.chunks(cols))
                    {
                        let (mean, inv) = row_norm_stats(xrow, eps);
                        let n = cols as f64;
                        let mut w_mean = 0.0;
                        let mut wx_mean = 0.0;
                        for ((&xv, &gv), &gainv) in xrow.iter().zip(grow).zip(gains) {
                            let w = gv * gainv;
                            let xhat = (xv - mean) * inv;
                            w_mean += w;
                            wx_mean += w * xhat;
                        }
                        w_mean /= n;
                        wx_mean /= n;
                        for (j, o) in brow.iter_mut().enumerate() {
                            let xhat = (xrow[j] - mean) * inv;
                            let w = grow[j] * gains[j];
                            *o += inv * (w - w_mean - xhat * wx_mean);
                        }
                    }
                    self.put_grad(x, buf);
                }
                if self.wants(gain) {
                    let mut buf = self.grad_buf(gain);
                    let xs = &self.nodes[x.0].data;
                    for (xrow, grow) in xs.chunks(cols).zip(g.chunks(cols)) {
                        let (mean, inv) = row_norm_stats(xrow, eps);
                        for ((o, &xv), &gv) in buf.iter_mut().zip(xrow).zip(grow) {
                            *o += gv * (xv - mean) * inv;
                        }
                    }
                    self.put_grad(gain, buf);
                }
                if self.wants(bias) {
                    let mut buf = self.grad_buf(bias);
                    for grow in g.chunks(cols) {
                        for (o, &gv) in buf.iter_mut().zip(grow) {
                            *o += gv;
                        }
                    }
                    self.put_grad(bias, buf);
                }
            }
            Op::Gelu(x) => {
                if self.wants(x) {
                    let mut buf = self.grad_buf(x);
                    for ((o, &xv), &gv) in
                        buf.iter_mut().zip(&self.nodes[x.0].data).zip(g.iter())
                    {
                        *o += gv * (normal_cdf(xv) + xv * normal_pdf(xv));
                    }
                    self.put_grad(x, buf);
                }
            }
            Op::Abs(x) => {
                if self.wants(x) {
                    let mut buf = self.grad_buf(x);
                    for ((o, &xv), &gv) in
                        buf.iter_mut().zip(&self.nodes[x.0].data).zip(g.iter())
                    {
                        *o += gv * if xv > 0.0 { 1.0 } else if xv < 0.0 { -1.0 } else { 0.0 };
                    }
                    self.put_grad(x, buf);
                }
            }
            Op::LnClamped(x, floor) => {
                if self.wants(x) {
                    let mut buf = self.grad_buf(x);
                    for ((o, &xv), &gv) in
                        buf.iter_mut().zip(&self.nodes[x.0].data).zip(g.iter())
                    {
                        if xv >= floor {
                            *o += gv / xv;
                        }
                    }
                    self.put_grad(x, buf);
                }
            }
            Op::Sum(x) => {
                if self.wants(x) {
                    let mut buf = self.grad_buf(x);
                    for o in buf.iter_mut() {
                        *o += g[0];
                    }
                    self.put_grad(x, buf);
                }
            }
            Op::Mean(x) => {
                if self.wants(x) {
                    let n = self.nodes[x.0].data.len() as f64;
                    let mut buf = self.grad_buf(x);
                    for o in buf.iter_mut() {
                        *o += g[0] / n;
                    }
                    self.put_grad(x, buf);
                }
            }
            Op::CosSim(u, v) => {
                let c = self.nodes[out.0].data[0];
                let gs = g[0];
                if self.wants(u) {
                    let mut buf = self.grad_buf(u);
                    let ud = &self.nodes[u.0].data;
                    let vd = &self.nodes[v.0].data;
                    let (nu, nv) = (norm(ud), norm(vd));
                    for ((o, &uv), &vv) in buf.iter_mut().zip(ud).zip(vd) {
                        *o += gs * (vv / (nu * nv) - c * uv / (nu * nu));
                    }
                    self.put_grad(u, buf);
                }
                if self.wants(v) {
                    let mut buf = self.grad_buf(v);
                    let ud = &self.nodes[u.0].data;
                    let vd = &self.nodes[v.0].data;
                    let (nu, nv) = (norm(ud), norm(vd));
                    for ((o, &vv), &uv) in buf.iter_mut().zip(vd).zip(ud) {
                        *o += gs * (uv / (nu * nv) - c * vv / (nv * nv));
                    }
                    self.put_grad(v, buf);
                }
            }
            Op::StackScalars(ref parts) => {
                for (k, &p) in parts.iter().enumerate() {
                    if self.wants(p) {
                        let mut buf = self.grad_buf(p);
                        buf[0] += g[k];
                        self.put_grad(p, buf);
                    }
                }
            }
        }
    }
}

// ── Scalar kernels ──────────────────────────────────────────────────────────

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn softmax_row(row: &mut [f64], temperature: f64) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Mean and 1/sqrt(var + eps) of one row (population variance).
fn row_norm_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Standard normal CDF via the error function.
pub(crate) fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// out += a(p x q) . b(q x r)
fn matmul_acc(a: &[f64], b: &[f64], p: usize, q: usize, r: usize, out: &mut [f64]) {
    for i in 0..p {
        let arow = &a[i * q..(i + 1) * q];
        let orow = &mut out[i * r..(i + 1) * r];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b[k * r..(k + 1) * r];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// out += a(p x q) . b(r x q)^T
fn matmul_nt_acc(a: &[f64], b: &[f64], p: usize, q: usize, r: usize, out: &mut [f64]) {
    for i in 0..p {
        let arow = &a[i * q..(i + 1) * q];
        let orow = &mut out[i * r..(i + 1) * r];
        for (o, j) in orow.iter_mut().zip(0..r) {
            *o += dot(arow, &b[j * q..(j + 1) * q]);
        }
    }
}

/// out += a(p x q)^T . b(p x r)
fn matmul_tn_acc(a: &[f64], b: &[f64], p: usize, q: usize, r: usize, out: &mut [f64]) {
    for k in 0..p {
        let arow = &a[k * q..(k + 1) * q];
        let brow = &b[k * r..(k + 1) * r];
        for (i, &aki) in arow.iter().enumerate() {
            let orow = &mut out[i * r..(i + 1) * r];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aki * bv;
            }
        }
    }
}
