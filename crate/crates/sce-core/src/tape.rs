//! Reverse-mode differentiation over a linear tape of dense tensors.
//!
//! Forward builders record one node per operation; `backward` replays the
//! tape in reverse, accumulating vector-Jacobian products. Buffers live in a
//! metered arena and are freed eagerly during the reverse sweep (a node's
//! value is dead once its own backward ran), which keeps the measured peak
//! close to the analytic logit-tensor size.
//!
//! Row views (`view_rows`) alias a parent's storage instead of copying;
//! their gradients accumulate directly into the parent's buffer, so slicing
//! the catalog out of the embedding table costs nothing.
//!
//! The fused loss ops (`ce_rows`, `sampled_ce_rows`, `sampled_bce_rows`,
//! `bucket_ce_rows`) materialize exactly one logit block each and stream
//! their backward pass, never allocating a gradient for the block.

use crate::error::{Error, Result};
use crate::kernels;
use crate::memory::MemMeter;
use crate::tensor::{sigmoid, softplus, Tensor};

use rayon::prelude::*;

pub type NodeId = usize;

/// Marks an inactive (padded) row in target index lists.
pub const INACTIVE: usize = usize::MAX;

const PAR_ROWS: usize = 64;
/// Fixed chunk count for column-parallel gradient accumulation; independent
/// of thread count so reductions are bit-deterministic.
const GRAD_CHUNKS: usize = 8;

#[derive(Debug, Clone)]
enum BufRef {
    Owned(usize),
    ViewRows { src: NodeId, start_row: usize },
}

#[derive(Debug)]
enum Op {
    Leaf,
    ViewRows,
    MatMul { a: NodeId, b: NodeId },
    MatMulTransB { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Neg { a: NodeId },
    Scale { a: NodeId, c: f64 },
    AddRowVec { a: NodeId, bias: NodeId },
    AddConstMask { a: NodeId },
    MulConstMask { a: NodeId },
    SoftmaxRows { a: NodeId },
    LogSumExpRows { a: NodeId },
    GatherCols { a: NodeId, cols: Vec<usize> },
    EmbedRows { table: NodeId, ids: Vec<usize>, frozen_row: Option<usize> },
    SliceCols { a: NodeId, start: usize },
    ConcatCols { parts: Vec<NodeId> },
    ConcatRows { parts: Vec<NodeId> },
    LayerNormRows { a: NodeId, gain: NodeId, bias: NodeId },
    Relu { a: NodeId },
    Softplus { a: NodeId },
    WeightedSum { a: NodeId, weights: Vec<f64> },
    SumAll { a: NodeId },
    CeRows { x: NodeId, y: NodeId, target_cols: Vec<usize> },
    SampledCeRows { x: NodeId, y: NodeId, targets: Vec<usize>, negatives: Vec<usize>, k: usize },
    SampledBceRows { x: NodeId, y: NodeId, targets: Vec<usize>, negatives: Vec<usize>, k: usize },
    BucketCeRows { x: NodeId, y: NodeId, rows: Vec<usize>, cols: Vec<usize>, targets: Vec<usize> },
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    buf: BufRef,
    /// Saved forward state and constant masks, freed with the node.
    aux: Vec<usize>,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    bufs: Vec<Option<Vec<f64>>>,
    grads: Vec<Option<Vec<f64>>>,
    meter: MemMeter,
    ran_backward: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::with_meter(MemMeter::new())
    }

    pub fn with_meter(meter: MemMeter) -> Self {
        Tape { nodes: Vec::new(), bufs: Vec::new(), grads: Vec::new(), meter, ran_backward: false }
    }

    pub fn meter(&self) -> &MemMeter {
        &self.meter
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── buffers ──────────────────────────────────────────────────────

    fn alloc_buf(&mut self, data: Vec<f64>) -> usize {
        self.meter.on_alloc(data.len());
        self.bufs.push(Some(data));
        self.bufs.len() - 1
    }

    fn free_buf(&mut self, idx: usize) {
        if let Some(data) = self.bufs[idx].take() {
            self.meter.on_free(data.len());
        }
    }

    fn push_node(&mut self, op: Op, rows: usize, cols: usize, data: Vec<f64>) -> NodeId {
        debug_assert_eq!(rows * cols, data.len());
        let buf = BufRef::Owned(self.alloc_buf(data));
        self.nodes.push(Node { op, rows, cols, buf, aux: Vec::new(), requires_grad: false });
        self.grads.push(None);
        self.nodes.len() - 1
    }

    fn attach_aux(&mut self, id: NodeId, data: Vec<f64>) {
        let buf = self.alloc_buf(data);
        self.nodes[id].aux.push(buf);
    }

    pub fn dims(&self, id: NodeId) -> (usize, usize) {
        (self.nodes[id].rows, self.nodes[id].cols)
    }

    pub fn numel(&self, id: NodeId) -> usize {
        self.nodes[id].rows * self.nodes[id].cols
    }

    /// Resolve a node's storage, following row views.
    pub fn data(&self, id: NodeId) -> &[f64] {
        let len = self.numel(id);
        let mut cur = id;
        let mut offset = 0;
        loop {
            match &self.nodes[cur].buf {
                BufRef::Owned(b) => {
                    let buf = self.bufs[*b].as_ref().expect("buffer read after free");
                    return &buf[offset..offset + len];
                }
                BufRef::ViewRows { src, start_row } => {
                    offset += start_row * self.nodes[cur].cols;
                    cur = *src;
                }
            }
        }
    }

    fn aux_data(&self, id: NodeId, slot: usize) -> &[f64] {
        let buf = self.nodes[id].aux[slot];
        self.bufs[buf].as_ref().expect("aux read after free")
    }

    /// Scalar value of a 1-element node.
    pub fn value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.numel(id), 1);
        self.data(id)[0]
    }

    /// The node (and element offset) whose gradient buffer backs `id`.
    fn grad_root(&self, id: NodeId) -> (NodeId, usize) {
        let mut cur = id;
        let mut offset = 0;
        loop {
            match &self.nodes[cur].buf {
                BufRef::Owned(_) => return (cur, offset),
                BufRef::ViewRows { src, start_row } => {
                    offset += start_row * self.nodes[cur].cols;
                    cur = *src;
                }
            }
        }
    }

    fn ensure_grad(&mut self, root: NodeId) {
        if self.grads[root].is_none() {
            let len = self.numel(root);
            self.meter.on_alloc(len);
            self.grads[root] = Some(vec![0.0; len]);
        }
    }

    fn grad_slice_mut(&mut self, id: NodeId) -> &mut [f64] {
        let (root, offset) = self.grad_root(id);
        let len = self.numel(id);
        self.ensure_grad(root);
        let g = self.grads[root].as_mut().unwrap();
        &mut g[offset..offset + len]
    }

    /// Gradient of a node after `backward`; `None` when no path to the loss
    /// touched it.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        let (root, offset) = self.grad_root(id);
        let len = self.numel(id);
        self.grads[root].as_ref().map(|g| &g[offset..offset + len])
    }

    /// Gradient as a tensor, zeros when no gradient flowed.
    pub fn grad_tensor(&self, id: NodeId) -> Tensor {
        let (rows, cols) = self.dims(id);
        let shape = if cols == 1 && rows == 1 {
            vec![1]
        } else if cols == 1 {
            vec![rows]
        } else {
            vec![rows, cols]
        };
        match self.grad(id) {
            Some(g) => Tensor::new(shape, g.to_vec()),
            None => Tensor::zeros(shape),
        }
    }

    // ── forward builders ─────────────────────────────────────────────

    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> NodeId {
        let id = self.push_node(Op::Leaf, t.rows(), t.cols(), t.data().to_vec());
        self.nodes[id].requires_grad = requires_grad;
        id
    }

    pub fn leaf_from_vec(
        &mut self,
        rows: usize,
        cols: usize,
        data: Vec<f64>,
        requires_grad: bool,
    ) -> NodeId {
        assert_eq!(rows * cols, data.len());
        let id = self.push_node(Op::Leaf, rows, cols, data);
        self.nodes[id].requires_grad = requires_grad;
        id
    }

    /// Zero-copy view of a contiguous row range.
    pub fn view_rows(&mut self, src: NodeId, start_row: usize, rows: usize) -> Result<NodeId> {
        let (r, c) = self.dims(src);
        if start_row + rows > r {
            return Err(Error::Shape {
                op: "view_rows",
                detail: format!("rows {start_row}..{} out of {r}", start_row + rows),
            });
        }
        self.nodes.push(Node {
            op: Op::ViewRows,
            rows,
            cols: c,
            buf: BufRef::ViewRows { src, start_row },
            aux: Vec::new(),
            requires_grad: false,
        });
        self.grads.push(None);
        Ok(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims(a);
        let (kb, n) = self.dims(b);
        if ka != kb {
            return Err(Error::Shape { op: "matmul", detail: format!("{m}x{ka} * {kb}x{n}") });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.data(a), self.data(b), m, ka, n, &mut out);
        Ok(self.push_node(Op::MatMul { a, b }, m, n, out))
    }

    /// a (m x k) times b^T where b is (n x k).
    pub fn matmul_transb(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims(a);
        let (n, kb) = self.dims(b);
        if ka != kb {
            return Err(Error::Shape {
                op: "matmul_transb",
                detail: format!("{m}x{ka} * ({n}x{kb})^T"),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_transb_acc(self.data(a), self.data(b), m, ka, n, &mut out);
        Ok(self.push_node(Op::MatMulTransB { a, b }, m, n, out))
    }

    fn binary_elementwise(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (m, n) = self.dims(a);
        if self.dims(b) != (m, n) {
            return Err(Error::Shape {
                op: name,
                detail: format!("{:?} vs {:?}", self.dims(a), self.dims(b)),
            });
        }
        let out: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Ok(self.push_node(op, m, n, out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.dims(a);
        let out: Vec<f64> = self.data(a).iter().map(|&x| -x).collect();
        self.push_node(Op::Neg { a }, m, n, out)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let (m, n) = self.dims(a);
        let out: Vec<f64> = self.data(a).iter().map(|&x| c * x).collect();
        self.push_node(Op::Scale { a, c }, m, n, out)
    }

    /// Broadcast-add a length-n vector to every row of a (m x n) matrix.
    pub fn add_row_vec(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims(a);
        if self.numel(bias) != n {
            return Err(Error::Shape {
                op: "add_row_vec",
                detail: format!("bias numel {} vs cols {n}", self.numel(bias)),
            });
        }
        let mut out = self.data(a).to_vec();
        {
            let bias_data = self.data(bias);
            for row in out.chunks_mut(n) {
                for (o, &bv) in row.iter_mut().zip(bias_data) {
                    *o += bv;
                }
            }
        }
        Ok(self.push_node(Op::AddRowVec { a, bias }, m, n, out))
    }

    /// Add a constant mask (no gradient through the mask). Entries may be
    /// `-inf` to knock positions out of a following softmax/logsumexp.
    pub fn add_const_mask(&mut self, a: NodeId, mask: &[f64]) -> Result<NodeId> {
        let (m, n) = self.dims(a);
        if mask.len() != m * n {
            return Err(Error::Shape {
                op: "add_const_mask",
                detail: format!("mask len {} vs {}", mask.len(), m * n),
            });
        }
        let out: Vec<f64> = self.data(a).iter().zip(mask).map(|(&x, &w)| x + w).collect();
        let id = self.push_node(Op::AddConstMask { a }, m, n, out);
        self.attach_aux(id, mask.to_vec());
        Ok(id)
    }

    /// Multiply by a constant mask (dropout, timeline masking).
    pub fn mul_const_mask(&mut self, a: NodeId, mask: &[f64]) -> Result<NodeId> {
        let (m, n) = self.dims(a);
        if mask.len() != m * n {
            return Err(Error::Shape {
                op: "mul_const_mask",
                detail: format!("mask len {} vs {}", mask.len(), m * n),
            });
        }
        let out: Vec<f64> = self.data(a).iter().zip(mask).map(|(&x, &w)| x * w).collect();
        let id = self.push_node(Op::MulConstMask { a }, m, n, out);
        self.attach_aux(id, mask.to_vec());
        Ok(id)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.dims(a);
        let mut out = self.data(a).to_vec();
        kernels::row_softmax_inplace(&mut out, m, n);
        self.push_node(Op::SoftmaxRows { a }, m, n, out)
    }

    /// Row-wise stable logsumexp; errors if any row has empty support.
    pub fn logsumexp_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims(a);
        let mut out = vec![0.0; m];
        kernels::row_logsumexp(self.data(a), m, n, &mut out);
        if out.iter().any(|v| *v == f64::NEG_INFINITY) {
            return Err(Error::EmptySupport);
        }
        Ok(self.push_node(Op::LogSumExpRows { a }, m, 1, out))
    }

    /// out[i] = a[i, cols[i]]; `INACTIVE` entries yield 0 and route no
    /// gradient.
    pub fn gather_cols(&mut self, a: NodeId, cols: &[usize]) -> Result<NodeId> {
        let (m, n) = self.dims(a);
        if cols.len() != m {
            return Err(Error::Shape {
                op: "gather_cols",
                detail: format!("cols len {} vs rows {m}", cols.len()),
            });
        }
        let mut out = vec![0.0; m];
        {
            let data = self.data(a);
            for (i, &c) in cols.iter().enumerate() {
                if c != INACTIVE {
                    if c >= n {
                        return Err(Error::Data(format!("gather_cols: column {c} out of {n}")));
                    }
                    out[i] = data[i * n + c];
                }
            }
        }
        Ok(self.push_node(Op::GatherCols { a, cols: cols.to_vec() }, m, 1, out))
    }

    /// Row gather from a table; `frozen_row` receives no gradient (the
    /// padding embedding stays fixed).
    pub fn embed_rows(
        &mut self,
        table: NodeId,
        ids: &[usize],
        frozen_row: Option<usize>,
    ) -> Result<NodeId> {
        let (r, d) = self.dims(table);
        let mut out = vec![0.0; ids.len() * d];
        {
            let data = self.data(table);
            for (i, &id) in ids.iter().enumerate() {
                if id >= r {
                    return Err(Error::Data(format!("embed_rows: row {id} out of {r}")));
                }
                out[i * d..(i + 1) * d].copy_from_slice(&data[id * d..(id + 1) * d]);
            }
        }
        Ok(self.push_node(
            Op::EmbedRows { table, ids: ids.to_vec(), frozen_row },
            ids.len(),
            d,
            out,
        ))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.dims(a);
        if start + len > n {
            return Err(Error::Shape {
                op: "slice_cols",
                detail: format!("cols {start}..{} out of {n}", start + len),
            });
        }
        let mut out = vec![0.0; m * len];
        {
            let data = self.data(a);
            for i in 0..m {
                out[i * len..(i + 1) * len]
                    .copy_from_slice(&data[i * n + start..i * n + start + len]);
            }
        }
        Ok(self.push_node(Op::SliceCols { a, start }, m, len, out))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        assert!(!parts.is_empty());
        let m = self.dims(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        for &p in parts {
            if self.dims(p).0 != m {
                return Err(Error::Shape { op: "concat_cols", detail: "row counts differ".into() });
            }
        }
        let mut out = vec![0.0; m * total];
        let mut at = 0;
        for &p in parts {
            let c = self.dims(p).1;
            let data = self.data(p);
            for i in 0..m {
                out[i * total + at..i * total + at + c].copy_from_slice(&data[i * c..(i + 1) * c]);
            }
            at += c;
        }
        Ok(self.push_node(Op::ConcatCols { parts: parts.to_vec() }, m, total, out))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        assert!(!parts.is_empty());
        let n = self.dims(parts[0]).1;
        let total: usize = parts.iter().map(|&p| self.dims(p).0).sum();
        let mut out = Vec::with_capacity(total * n);
        for &p in parts {
            if self.dims(p).1 != n {
                return Err(Error::Shape { op: "concat_rows", detail: "col counts differ".into() });
            }
            out.extend_from_slice(self.data(p));
        }
        Ok(self.push_node(Op::ConcatRows { parts: parts.to_vec() }, total, n, out))
    }

    /// Row layer norm with learned gain/bias vectors (length n).
    pub fn layer_norm_rows(
        &mut self,
        a: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (m, n) = self.dims(a);
        if self.numel(gain) != n || self.numel(bias) != n {
            return Err(Error::Shape { op: "layer_norm_rows", detail: "gain/bias length".into() });
        }
        let mut out = vec![0.0; m * n];
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        {
            let data = self.data(a);
            let g = self.data(gain);
            let b = self.data(bias);
            for i in 0..m {
                let row = &data[i * n..(i + 1) * n];
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[i] = is;
                for j in 0..n {
                    let xh = (row[j] - mean) * is;
                    xhat[i * n + j] = xh;
                    out[i * n + j] = xh * g[j] + b[j];
                }
            }
        }
        let id = self.push_node(Op::LayerNormRows { a, gain, bias }, m, n, out);
        self.attach_aux(id, xhat);
        self.attach_aux(id, inv_std);
        Ok(id)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.dims(a);
        let out: Vec<f64> = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        self.push_node(Op::Relu { a }, m, n, out)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.dims(a);
        let out: Vec<f64> = self.data(a).iter().map(|&x| softplus(x)).collect();
        self.push_node(Op::Softplus { a }, m, n, out)
    }

    /// Scalar dot of a node with a constant weight vector.
    pub fn weighted_sum(&mut self, a: NodeId, weights: &[f64]) -> Result<NodeId> {
        if weights.len() != self.numel(a) {
            return Err(Error::Shape {
                op: "weighted_sum",
                detail: format!("weights {} vs numel {}", weights.len(), self.numel(a)),
            });
        }
        let v = kernels::dot(self.data(a), weights);
        Ok(self.push_node(Op::WeightedSum { a, weights: weights.to_vec() }, 1, 1, vec![v]))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v: f64 = self.data(a).iter().sum();
        self.push_node(Op::SumAll { a }, 1, 1, vec![v])
    }

    // ── fused loss kernels ───────────────────────────────────────────

    /// Full cross-entropy rows: for each active row i,
    /// `loss[i] = logsumexp(x_i . Y^T) - x_i . y_{t_i}`.
    /// The (m x C) logit block is materialized once and saved; backward
    /// streams softmax rows out of it without a logit-gradient buffer.
    pub fn ce_rows(&mut self, x: NodeId, y: NodeId, target_cols: &[usize]) -> Result<NodeId> {
        let (m, d) = self.dims(x);
        let (c, dy) = self.dims(y);
        if d != dy {
            return Err(Error::Shape { op: "ce_rows", detail: format!("x {m}x{d} vs y {c}x{dy}") });
        }
        if target_cols.len() != m {
            return Err(Error::Shape { op: "ce_rows", detail: "targets length".into() });
        }
        for &t in target_cols {
            if t != INACTIVE && t >= c {
                return Err(Error::Data(format!("ce_rows: target {t} out of catalog {c}")));
            }
        }
        let mut logits = vec![0.0; m * c];
        kernels::matmul_transb_acc(self.data(x), self.data(y), m, d, c, &mut logits);
        let mut denom = vec![0.0; m];
        kernels::row_logsumexp(&logits, m, c, &mut denom);
        let mut out = vec![0.0; m];
        for (i, &t) in target_cols.iter().enumerate() {
            if t != INACTIVE {
                out[i] = denom[i] - logits[i * c + t];
            }
        }
        let id =
            self.push_node(Op::CeRows { x, y, target_cols: target_cols.to_vec() }, m, 1, out);
        self.attach_aux(id, logits);
        self.attach_aux(id, denom);
        Ok(id)
    }

    /// Sampled cross-entropy rows over k negatives (catalog row indices):
    /// `loss[i] = logsumexp([pos_i, neg_i1..neg_ik]) - pos_i`.
    pub fn sampled_ce_rows(
        &mut self,
        x: NodeId,
        y: NodeId,
        targets: &[usize],
        negatives: &[usize],
        k: usize,
    ) -> Result<NodeId> {
        let m = self.check_sampled("sampled_ce_rows", x, y, targets, negatives, k)?;
        let (neg_logits, pos) = self.sampled_logits(x, y, targets, negatives, k);
        let mut out = vec![0.0; m];
        let mut denom = vec![0.0; m];
        for i in 0..m {
            if targets[i] == INACTIVE {
                continue;
            }
            let row = &neg_logits[i * k..(i + 1) * k];
            let mx = row.iter().cloned().fold(pos[i], f64::max);
            let sum: f64 =
                (pos[i] - mx).exp() + row.iter().map(|&v| (v - mx).exp()).sum::<f64>();
            denom[i] = mx + sum.ln();
            out[i] = denom[i] - pos[i];
        }
        let id = self.push_node(
            Op::SampledCeRows {
                x,
                y,
                targets: targets.to_vec(),
                negatives: negatives.to_vec(),
                k,
            },
            m,
            1,
            out,
        );
        self.attach_aux(id, neg_logits);
        self.attach_aux(id, pos);
        self.attach_aux(id, denom);
        Ok(id)
    }

    /// Binary cross-entropy rows with k negatives:
    /// `loss[i] = softplus(-pos_i) + sum_j softplus(neg_ij)`.
    pub fn sampled_bce_rows(
        &mut self,
        x: NodeId,
        y: NodeId,
        targets: &[usize],
        negatives: &[usize],
        k: usize,
    ) -> Result<NodeId> {
        let m = self.check_sampled("sampled_bce_rows", x, y, targets, negatives, k)?;
        let (neg_logits, pos) = self.sampled_logits(x, y, targets, negatives, k);
        let mut out = vec![0.0; m];
        for i in 0..m {
            if targets[i] == INACTIVE {
                continue;
            }
            let mut v = softplus(-pos[i]);
            for &nl in &neg_logits[i * k..(i + 1) * k] {
                v += softplus(nl);
            }
            out[i] = v;
        }
        let id = self.push_node(
            Op::SampledBceRows {
                x,
                y,
                targets: targets.to_vec(),
                negatives: negatives.to_vec(),
                k,
            },
            m,
            1,
            out,
        );
        self.attach_aux(id, neg_logits);
        self.attach_aux(id, pos);
        Ok(id)
    }

    fn check_sampled(
        &self,
        op: &'static str,
        x: NodeId,
        y: NodeId,
        targets: &[usize],
        negatives: &[usize],
        k: usize,
    ) -> Result<usize> {
        let (m, d) = self.dims(x);
        let (c, dy) = self.dims(y);
        if d != dy {
            return Err(Error::Shape { op, detail: format!("x {m}x{d} vs y {c}x{dy}") });
        }
        if targets.len() != m || negatives.len() != m * k || k == 0 {
            return Err(Error::Shape { op, detail: "targets/negatives layout".into() });
        }
        for &t in targets {
            if t != INACTIVE && t >= c {
                return Err(Error::Data(format!("{op}: target row {t} out of {c}")));
            }
        }
        for &nid in negatives {
            if nid >= c {
                return Err(Error::Data(format!("{op}: negative row {nid} out of {c}")));
            }
        }
        Ok(m)
    }

    fn sampled_logits(
        &self,
        x: NodeId,
        y: NodeId,
        targets: &[usize],
        negatives: &[usize],
        k: usize,
    ) -> (Vec<f64>, Vec<f64>) {
        let (m, d) = self.dims(x);
        let xd = self.data(x);
        let yd = self.data(y);
        let mut neg_logits = vec![0.0; m * k];
        let mut pos = vec![0.0; m];
        let fill = |i: usize, neg_row: &mut [f64], pos_i: &mut f64| {
            let xi = &xd[i * d..(i + 1) * d];
            if targets[i] != INACTIVE {
                *pos_i = kernels::dot(xi, &yd[targets[i] * d..(targets[i] + 1) * d]);
            }
            for (j, nl) in neg_row.iter_mut().enumerate() {
                let nid = negatives[i * k + j];
                *nl = kernels::dot(xi, &yd[nid * d..(nid + 1) * d]);
            }
        };
        if m >= PAR_ROWS {
            neg_logits
                .par_chunks_mut(k)
                .zip(pos.par_iter_mut())
                .enumerate()
                .for_each(|(i, (nr, p))| fill(i, nr, p));
        } else {
            for (i, (nr, p)) in neg_logits.chunks_mut(k).zip(pos.iter_mut()).enumerate() {
                fill(i, nr, p);
            }
        }
        (neg_logits, pos)
    }

    /// One bucket of the bucketed cross-entropy: selected output rows
    /// (`rows`, indices into x) against selected catalog rows (`cols`,
    /// indices into y). Logits whose catalog item equals the row's own
    /// target are masked to -inf; the positive logit enters separately.
    /// Output per selected row: `log(e^{pos} + sum_j e^{M_ij}) - pos`.
    pub fn bucket_ce_rows(
        &mut self,
        x: NodeId,
        y: NodeId,
        rows: &[usize],
        cols: &[usize],
        targets: &[usize],
    ) -> Result<NodeId> {
        let (m, d) = self.dims(x);
        let (c, dy) = self.dims(y);
        if d != dy {
            return Err(Error::Shape {
                op: "bucket_ce_rows",
                detail: "embedding dims differ".into(),
            });
        }
        if targets.len() != rows.len() {
            return Err(Error::Shape { op: "bucket_ce_rows", detail: "targets/rows length".into() });
        }
        for &r in rows {
            if r >= m {
                return Err(Error::Data(format!("bucket_ce_rows: row {r} out of {m}")));
            }
        }
        for &j in cols {
            if j >= c {
                return Err(Error::Data(format!("bucket_ce_rows: col {j} out of {c}")));
            }
        }
        for &t in targets {
            if t >= c {
                return Err(Error::Data(format!("bucket_ce_rows: target {t} out of {c}")));
            }
        }
        let bx = rows.len();
        let by = cols.len();
        let mut logits = vec![0.0; bx * by];
        let mut pos = vec![0.0; bx];
        {
            let xd = self.data(x);
            let yd = self.data(y);
            let fill = |i: usize, lrow: &mut [f64], pos_i: &mut f64| {
                let xi = &xd[rows[i] * d..(rows[i] + 1) * d];
                let t = targets[i];
                *pos_i = kernels::dot(xi, &yd[t * d..(t + 1) * d]);
                for (j, lv) in lrow.iter_mut().enumerate() {
                    let cj = cols[j];
                    *lv = if cj == t {
                        f64::NEG_INFINITY
                    } else {
                        kernels::dot(xi, &yd[cj * d..(cj + 1) * d])
                    };
                }
            };
            if bx * by * d >= 1 << 18 {
                logits
                    .par_chunks_mut(by)
                    .zip(pos.par_iter_mut())
                    .enumerate()
                    .for_each(|(i, (lr, p))| fill(i, lr, p));
            } else {
                for (i, (lr, p)) in logits.chunks_mut(by).zip(pos.iter_mut()).enumerate() {
                    fill(i, lr, p);
                }
            }
        }
        let mut out = vec![0.0; bx];
        let mut denom = vec![0.0; bx];
        for i in 0..bx {
            let row = &logits[i * by..(i + 1) * by];
            let mx = row.iter().cloned().fold(pos[i], f64::max);
            let sum: f64 =
                (pos[i] - mx).exp() + row.iter().map(|&v| (v - mx).exp()).sum::<f64>();
            denom[i] = mx + sum.ln();
            out[i] = denom[i] - pos[i];
        }
        let id = self.push_node(
            Op::BucketCeRows {
                x,
                y,
                rows: rows.to_vec(),
                cols: cols.to_vec(),
                targets: targets.to_vec(),
            },
            bx,
            1,
            out,
        );
        self.attach_aux(id, logits);
        self.attach_aux(id, pos);
        self.attach_aux(id, denom);
        Ok(id)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Frees interior buffers eagerly;
    /// leaf values and leaf gradients survive for the caller.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.numel(root) != 1 {
            return Err(Error::NonScalarRoot { numel: self.numel(root) });
        }
        if self.ran_backward {
            return Err(Error::Param("backward may run only once per tape".into()));
        }
        self.ran_backward = true;
        self.grad_slice_mut(root)[0] = 1.0;

        for id in (0..self.nodes.len()).rev() {
            let is_leaf = matches!(self.nodes[id].op, Op::Leaf);
            let is_view = matches!(self.nodes[id].buf, BufRef::ViewRows { .. });
            if is_view {
                continue;
            }
            if let Some(g) = self.grads[id].take() {
                if is_leaf {
                    self.grads[id] = Some(g);
                } else {
                    self.backward_node(id, &g);
                    self.meter.on_free(g.len());
                }
            }
            // The root's value stays readable after backward.
            if !is_leaf && id != root {
                if let BufRef::Owned(b) = self.nodes[id].buf.clone() {
                    self.free_buf(b);
                }
                let aux = std::mem::take(&mut self.nodes[id].aux);
                for b in aux {
                    self.free_buf(b);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, contrib: &[f64]) {
        let g = self.grad_slice_mut(id);
        debug_assert_eq!(g.len(), contrib.len());
        for (gv, &cv) in g.iter_mut().zip(contrib) {
            *gv += cv;
        }
    }

    fn backward_node(&mut self, id: NodeId, g: &[f64]) {
        let (rows, cols) = self.dims(id);
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf | Op::ViewRows => {}
            Op::MatMul { a, b } => {
                let (m, k) = self.dims(*a);
                let (_, n) = self.dims(*b);
                let mut da = vec![0.0; m * k];
                kernels::matmul_transb_acc(g, self.data(*b), m, n, k, &mut da);
                self.accumulate(*a, &da);
                drop(da);
                let mut db = vec![0.0; k * n];
                kernels::matmul_transa_acc(self.data(*a), g, m, k, n, &mut db);
                self.accumulate(*b, &db);
            }
            Op::MatMulTransB { a, b } => {
                let (m, k) = self.dims(*a);
                let (n, _) = self.dims(*b);
                let mut da = vec![0.0; m * k];
                kernels::matmul_acc(g, self.data(*b), m, n, k, &mut da);
                self.accumulate(*a, &da);
                drop(da);
                let mut db = vec![0.0; n * k];
                kernels::matmul_transa_acc(g, self.data(*a), m, n, k, &mut db);
                self.accumulate(*b, &db);
            }
            Op::Add { a, b } => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::Sub { a, b } => {
                self.accumulate(*a, g);
                let neg: Vec<f64> = g.iter().map(|&v| -v).collect();
                self.accumulate(*b, &neg);
            }
            Op::Mul { a, b } => {
                let da: Vec<f64> =
                    g.iter().zip(self.data(*b)).map(|(&gv, &bv)| gv * bv).collect();
                self.accumulate(*a, &da);
                let db: Vec<f64> =
                    g.iter().zip(self.data(*a)).map(|(&gv, &av)| gv * av).collect();
                self.accumulate(*b, &db);
            }
            Op::Neg { a } => {
                let da: Vec<f64> = g.iter().map(|&v| -v).collect();
                self.accumulate(*a, &da);
            }
            Op::Scale { a, c } => {
                let c = *c;
                let da: Vec<f64> = g.iter().map(|&v| c * v).collect();
                self.accumulate(*a, &da);
            }
            Op::AddRowVec { a, bias } => {
                self.accumulate(*a, g);
                let n = cols;
                let mut db = vec![0.0; n];
                for row in g.chunks(n) {
                    for (d, &gv) in db.iter_mut().zip(row) {
                        *d += gv;
                    }
                }
                self.accumulate(*bias, &db);
            }
            Op::AddConstMask { a } => {
                // Pass-through; masked (-inf) outputs carry zero upstream
                // because any following softmax/lse zeroed them.
                self.accumulate(*a, g);
            }
            Op::MulConstMask { a } => {
                let da: Vec<f64> =
                    g.iter().zip(self.aux_data(id, 0)).map(|(&gv, &w)| gv * w).collect();
                self.accumulate(*a, &da);
            }
            Op::SoftmaxRows { a } => {
                let n = cols;
                let mut da = vec![0.0; rows * n];
                {
                    let p = self.data(id);
                    for i in 0..rows {
                        let pr = &p[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let inner = kernels::dot(pr, gr);
                        for j in 0..n {
                            da[i * n + j] = pr[j] * (gr[j] - inner);
                        }
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::LogSumExpRows { a } => {
                let (m, n) = self.dims(*a);
                let mut da = vec![0.0; m * n];
                {
                    let out = self.data(id);
                    let ad = self.data(*a);
                    for i in 0..m {
                        let gi = g[i];
                        if gi != 0.0 {
                            for j in 0..n {
                                let v = ad[i * n + j];
                                if v != f64::NEG_INFINITY {
                                    da[i * n + j] = gi * (v - out[i]).exp();
                                }
                            }
                        }
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::GatherCols { a, cols: idx } => {
                let (m, n) = self.dims(*a);
                let mut da = vec![0.0; m * n];
                for (i, &c) in idx.iter().enumerate() {
                    if c != INACTIVE {
                        da[i * n + c] = g[i];
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::EmbedRows { table, ids, frozen_row } => {
                let (r, d) = self.dims(*table);
                let mut dt = vec![0.0; r * d];
                for (i, &rid) in ids.iter().enumerate() {
                    if Some(rid) == *frozen_row {
                        continue;
                    }
                    kernels::axpy(&mut dt[rid * d..(rid + 1) * d], &g[i * d..(i + 1) * d], 1.0);
                }
                self.accumulate(*table, &dt);
            }
            Op::SliceCols { a, start } => {
                let (m, n) = self.dims(*a);
                let w = cols;
                let start = *start;
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    da[i * n + start..i * n + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                self.accumulate(*a, &da);
            }
            Op::ConcatCols { parts } => {
                let total = cols;
                let mut at = 0;
                for &p in parts {
                    let (pm, pc) = self.dims(p);
                    let mut dp = vec![0.0; pm * pc];
                    for i in 0..pm {
                        dp[i * pc..(i + 1) * pc]
                            .copy_from_slice(&g[i * total + at..i * total + at + pc]);
                    }
                    self.accumulate(p, &dp);
                    at += pc;
                }
            }
            Op::ConcatRows { parts } => {
                let n = cols;
                let mut at = 0;
                for &p in parts {
                    let (pm, _) = self.dims(p);
                    let dp = g[at * n..(at + pm) * n].to_vec();
                    self.accumulate(p, &dp);
                    at += pm;
                }
            }
            Op::LayerNormRows { a, gain, bias } => {
                let (m, n) = self.dims(*a);
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                let mut da = vec![0.0; m * n];
                {
                    let xhat = self.aux_data(id, 0);
                    let inv_std = self.aux_data(id, 1);
                    let gd = self.data(*gain);
                    for i in 0..m {
                        let xr = &xhat[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..n {
                            dgain[j] += gr[j] * xr[j];
                            dbias[j] += gr[j];
                            let dxh = gr[j] * gd[j];
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xr[j];
                        }
                        let mean_dxhat = sum_dxhat / n as f64;
                        let mean_dxhat_xhat = sum_dxhat_xhat / n as f64;
                        for j in 0..n {
                            let dxh = gr[j] * gd[j];
                            da[i * n + j] =
                                inv_std[i] * (dxh - mean_dxhat - xr[j] * mean_dxhat_xhat);
                        }
                    }
                }
                self.accumulate(*a, &da);
                self.accumulate(*gain, &dgain);
                self.accumulate(*bias, &dbias);
            }
            Op::Relu { a } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(&gv, &av)| if av > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(*a, &da);
            }
            Op::Softplus { a } => {
                let da: Vec<f64> =
                    g.iter().zip(self.data(*a)).map(|(&gv, &av)| gv * sigmoid(av)).collect();
                self.accumulate(*a, &da);
            }
            Op::WeightedSum { a, weights } => {
                let da: Vec<f64> = weights.iter().map(|&w| w * g[0]).collect();
                self.accumulate(*a, &da);
            }
            Op::SumAll { a } => {
                let da = vec![g[0]; self.numel(*a)];
                self.accumulate(*a, &da);
            }
            Op::CeRows { x, y, target_cols } => {
                self.backward_ce_rows(id, *x, *y, target_cols, g);
            }
            Op::SampledCeRows { x, y, targets, negatives, k } => {
                self.backward_sampled(id, *x, *y, targets, negatives, *k, g, true);
            }
            Op::SampledBceRows { x, y, targets, negatives, k } => {
                self.backward_sampled(id, *x, *y, targets, negatives, *k, g, false);
            }
            Op::BucketCeRows { x, y, rows: sel_rows, cols: sel_cols, targets } => {
                self.backward_bucket_ce(id, *x, *y, sel_rows, sel_cols, targets, g);
            }
        }
        self.nodes[id].op = op;
    }

    fn backward_ce_rows(&mut self, id: NodeId, x: NodeId, y: NodeId, targets: &[usize], g: &[f64]) {
        let (m, d) = self.dims(x);
        let (c, _) = self.dims(y);
        let big = m * c * d >= 1 << 20;
        // dx_i = g_i * (sum_j p_ij y_j - y_{t_i})
        let dx = {
            let logits = self.aux_data(id, 0);
            let denom = self.aux_data(id, 1);
            let yd = self.data(y);
            let mut dx = vec![0.0; m * d];
            let row = |i: usize, dxr: &mut [f64]| {
                let t = targets[i];
                if t == INACTIVE || g[i] == 0.0 {
                    return;
                }
                let lr = &logits[i * c..(i + 1) * c];
                for j in 0..c {
                    let p = (lr[j] - denom[i]).exp();
                    let coef = g[i] * (p - if j == t { 1.0 } else { 0.0 });
                    if coef != 0.0 {
                        kernels::axpy(dxr, &yd[j * d..(j + 1) * d], coef);
                    }
                }
            };
            if big {
                dx.par_chunks_mut(d).enumerate().for_each(|(i, dxr)| row(i, dxr));
            } else {
                for (i, dxr) in dx.chunks_mut(d).enumerate() {
                    row(i, dxr);
                }
            }
            dx
        };
        self.accumulate(x, &dx);
        drop(dx);
        // dy_j = sum_i g_i * (p_ij - [j == t_i]) * x_i, column-chunked so
        // each catalog row is owned by exactly one worker.
        let dy = {
            let logits = self.aux_data(id, 0);
            let denom = self.aux_data(id, 1);
            let xd = self.data(x);
            let mut dy = vec![0.0; c * d];
            let chunk = c.div_ceil(GRAD_CHUNKS);
            let do_chunk = |(ci, dyc): (usize, &mut [f64])| {
                let j0 = ci * chunk;
                let jn = (j0 + dyc.len() / d).min(c);
                for i in 0..m {
                    let t = targets[i];
                    if t == INACTIVE || g[i] == 0.0 {
                        continue;
                    }
                    let lr = &logits[i * c..(i + 1) * c];
                    let xi = &xd[i * d..(i + 1) * d];
                    for j in j0..jn {
                        let p = (lr[j] - denom[i]).exp();
                        let coef = g[i] * (p - if j == t { 1.0 } else { 0.0 });
                        if coef != 0.0 {
                            kernels::axpy(&mut dyc[(j - j0) * d..(j - j0 + 1) * d], xi, coef);
                        }
                    }
                }
            };
            if big {
                dy.par_chunks_mut(chunk * d).enumerate().for_each(do_chunk);
            } else {
                dy.chunks_mut(chunk * d).enumerate().for_each(do_chunk);
            }
            dy
        };
        self.accumulate(y, &dy);
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_sampled(
        &mut self,
        id: NodeId,
        x: NodeId,
        y: NodeId,
        targets: &[usize],
        negatives: &[usize],
        k: usize,
        g: &[f64],
        is_ce: bool,
    ) {
        let (m, d) = self.dims(x);
        let (c, _) = self.dims(y);
        // Per-row coefficients: (pos_coef, neg_coef_j) for the VJP.
        let coef = |i: usize, pos: &[f64], neg: &[f64], denom: Option<&[f64]>, j: Option<usize>| -> f64 {
            if is_ce {
                let dn = denom.unwrap();
                match j {
                    None => (pos[i] - dn[i]).exp() - 1.0,
                    Some(j) => (neg[i * k + j] - dn[i]).exp(),
                }
            } else {
                match j {
                    None => -sigmoid(-pos[i]),
                    Some(j) => sigmoid(neg[i * k + j]),
                }
            }
        };
        let dx = {
            let neg = self.aux_data(id, 0);
            let pos = self.aux_data(id, 1);
            let denom = if is_ce { Some(self.aux_data(id, 2)) } else { None };
            let yd = self.data(y);
            let mut dx = vec![0.0; m * d];
            for i in 0..m {
                let t = targets[i];
                if t == INACTIVE || g[i] == 0.0 {
                    continue;
                }
                let dxr = &mut dx[i * d..(i + 1) * d];
                kernels::axpy(dxr, &yd[t * d..(t + 1) * d], g[i] * coef(i, pos, neg, denom, None));
                for j in 0..k {
                    let nid = negatives[i * k + j];
                    kernels::axpy(
                        dxr,
                        &yd[nid * d..(nid + 1) * d],
                        g[i] * coef(i, pos, neg, denom, Some(j)),
                    );
                }
            }
            dx
        };
        self.accumulate(x, &dx);
        drop(dx);
        let dy = {
            let neg = self.aux_data(id, 0);
            let pos = self.aux_data(id, 1);
            let denom = if is_ce { Some(self.aux_data(id, 2)) } else { None };
            let xd = self.data(x);
            let mut dy = vec![0.0; c * d];
            for i in 0..m {
                let t = targets[i];
                if t == INACTIVE || g[i] == 0.0 {
                    continue;
                }
                let xi = &xd[i * d..(i + 1) * d];
                kernels::axpy(
                    &mut dy[t * d..(t + 1) * d],
                    xi,
                    g[i] * coef(i, pos, neg, denom, None),
                );
                for j in 0..k {
                    let nid = negatives[i * k + j];
                    kernels::axpy(
                        &mut dy[nid * d..(nid + 1) * d],
                        xi,
                        g[i] * coef(i, pos, neg, denom, Some(j)),
                    );
                }
            }
            dy
        };
        self.accumulate(y, &dy);
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_bucket_ce(
        &mut self,
        id: NodeId,
        x: NodeId,
        y: NodeId,
        rows: &[usize],
        cols: &[usize],
        targets: &[usize],
        g: &[f64],
    ) {
        let (xm, d) = self.dims(x);
        let (c, _) = self.dims(y);
        let bx = rows.len();
        let by = cols.len();
        let dx = {
            let logits = self.aux_data(id, 0);
            let pos = self.aux_data(id, 1);
            let denom = self.aux_data(id, 2);
            let yd = self.data(y);
            let mut dx_rows = vec![0.0; bx * d];
            let one = |i: usize, dxr: &mut [f64]| {
                if g[i] == 0.0 {
                    return;
                }
                let q = (pos[i] - denom[i]).exp();
                kernels::axpy(dxr, &yd[targets[i] * d..(targets[i] + 1) * d], g[i] * (q - 1.0));
                let lr = &logits[i * by..(i + 1) * by];
                for (j, &lv) in lr.iter().enumerate() {
                    if lv != f64::NEG_INFINITY {
                        let p = (lv - denom[i]).exp();
                        kernels::axpy(dxr, &yd[cols[j] * d..(cols[j] + 1) * d], g[i] * p);
                    }
                }
            };
            if bx * by * d >= 1 << 18 {
                dx_rows.par_chunks_mut(d).enumerate().for_each(|(i, r)| one(i, r));
            } else {
                for (i, r) in dx_rows.chunks_mut(d).enumerate() {
                    one(i, r);
                }
            }
            // Scatter into full dX; rows are distinct within a bucket.
            let mut dx = vec![0.0; xm * d];
            for (i, &r) in rows.iter().enumerate() {
                dx[r * d..(r + 1) * d].copy_from_slice(&dx_rows[i * d..(i + 1) * d]);
            }
            dx
        };
        self.accumulate(x, &dx);
        drop(dx);
        let dy = {
            let logits = self.aux_data(id, 0);
            let pos = self.aux_data(id, 1);
            let denom = self.aux_data(id, 2);
            let xd = self.data(x);
            let mut dy = vec![0.0; c * d];
            // Negative-logit part: each selected column owned by one pass.
            for (j, &cj) in cols.iter().enumerate() {
                let dyr = &mut dy[cj * d..(cj + 1) * d];
                for i in 0..bx {
                    let lv = logits[i * by + j];
                    if g[i] != 0.0 && lv != f64::NEG_INFINITY {
                        let p = (lv - denom[i]).exp();
                        kernels::axpy(dyr, &xd[rows[i] * d..(rows[i] + 1) * d], g[i] * p);
                    }
                }
            }
            // Positive part, sequential (targets may repeat).
            for i in 0..bx {
                if g[i] != 0.0 {
                    let q = (pos[i] - denom[i]).exp();
                    let t = targets[i];
                    kernels::axpy(
                        &mut dy[t * d..(t + 1) * d],
                        &xd[rows[i] * d..(rows[i] + 1) * d],
                        g[i] * (q - 1.0),
                    );
                }
            }
            dy
        };
        self.accumulate(y, &dy);
    }
}

impl Drop for Tape {
    fn drop(&mut self) {
        for b in self.bufs.iter_mut() {
            if let Some(data) = b.take() {
                self.meter.on_free(data.len());
            }
        }
        for gslot in self.grads.iter_mut() {
            if let Some(g) = gslot.take() {
                self.meter.on_free(g.len());
            }
        }
    }
}
