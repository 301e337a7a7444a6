//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] is built fresh for every forward pass: leaves are copied in
//! from [`Tensor`]s, each operation records its inputs and enough state to
//! run its backward rule, and [`Tape::backward`] sweeps the recording once in
//! reverse. Besides dense linear algebra, the tape carries the graph-segment
//! primitives (gather, scatter-sum, segment softmax, weighted sparse
//! aggregation) needed to express message-passing networks, so gradients are
//! available with respect to both parameters and input feature matrices.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::CoreError;
use crate::rng::KeyedRng;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Addresses one dropout site: masks depend only on (seed, site, step).
#[derive(Debug, Clone, Copy)]
pub struct DropoutKey {
    pub seed: u64,
    pub site: u64,
    pub step: u64,
}

/// Sparse adjacency view consumed by [`Tape::adj_matmul`]: incoming-edge CSR
/// with one weight per edge.
#[derive(Debug, Clone)]
pub struct SparseAdj {
    /// Per-destination segment boundaries, length n+1.
    pub offsets: Arc<Vec<usize>>,
    /// Source node of each edge, segment-ordered by destination.
    pub srcs: Arc<Vec<usize>>,
    /// Per-edge weight, same order as `srcs`.
    pub weights: Arc<Vec<f64>>,
}

enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Hadamard { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    AddRowBias { x: usize, bias: usize },
    ScalarMul { x: usize, s: usize },
    Elu { x: usize },
    LeakyRelu { x: usize, slope: f64 },
    Dropout { x: usize, mask: Vec<f64> },
    ConcatCols { parts: Vec<usize> },
    SelectRows { x: usize, idx: Arc<Vec<usize>> },
    ScatterSum { messages: usize, dsts: Arc<Vec<usize>> },
    SegmentSoftmax { logits: usize, dsts: Arc<Vec<usize>> },
    RowDot { a: usize, b: usize },
    RowMul { x: usize, s: usize },
    RowL2Normalize { x: usize, eps: f64 },
    AdjMatmul { x: usize, adj: SparseAdj },
    AttnAggregate { values: usize, weights: usize, srcs: Arc<Vec<usize>>, dsts: Arc<Vec<usize>> },
    MseLoss { pred: usize, target: Arc<Vec<f64>>, mask: Arc<Vec<usize>> },
    CrossEntropy { logits: usize, labels: Arc<Vec<usize>>, mask: Arc<Vec<usize>>, probs: Vec<f64> },
    SumAll { x: usize },
}

struct Meta {
    rows: usize,
    cols: usize,
    track: bool,
    op: Op,
}

/// Define-by-run recording of one forward pass.
pub struct Tape {
    metas: Vec<Meta>,
    values: Vec<Vec<f64>>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

// Below this element count, ops stay single-threaded.
const PAR_THRESHOLD: usize = 1 << 15;

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            metas: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.metas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.metas.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, values: Vec<f64>, track: bool, op: Op) -> Var {
        debug_assert_eq!(values.len(), rows * cols);
        self.metas.push(Meta { rows, cols, track, op });
        self.values.push(values);
        self.grads.push(None);
        Var(self.metas.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.metas[v.0].track
    }

    /// Copies a tensor in as a leaf; it is differentiable iff the tensor
    /// has `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.rows(), t.cols(), t.data().to_vec(), t.requires_grad, Op::Leaf)
    }

    /// Non-differentiable leaf from raw values.
    pub fn constant(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Result<Var, CoreError> {
        if values.len() != rows * cols {
            return Err(CoreError::Shape(format!(
                "constant: expected {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        Ok(self.push(rows, cols, values, false, Op::Leaf))
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let m = &self.metas[v.0];
        (m.rows, m.cols)
    }

    pub fn values(&self, v: Var) -> &[f64] {
        &self.values[v.0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let (r, c) = self.dims(v);
        Tensor::from_vec(r, c, self.values[v.0].clone()).expect("tape node shape")
    }

    /// Gradient of a node, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn scalar(&self, v: Var) -> Result<f64, CoreError> {
        let (r, c) = self.dims(v);
        if (r, c) != (1, 1) {
            return Err(CoreError::Contract(format!("expected scalar, got {r}x{c}")));
        }
        Ok(self.values[v.0][0])
    }

    /// Copies the gradient of `v` into `t.grad` (accumulating).
    pub fn accumulate_grad_into(&self, v: Var, t: &mut Tensor) -> Result<(), CoreError> {
        let (r, c) = self.dims(v);
        if (r, c) != t.shape() {
            return Err(CoreError::Shape(format!(
                "grad write-back: node {r}x{c} vs tensor {:?}",
                t.shape()
            )));
        }
        if let Some(g) = self.grads[v.0].as_ref() {
            let buf = t.grad.get_or_insert_with(|| vec![0.0; r * c]);
            for (dst, src) in buf.iter_mut().zip(g) {
                *dst += src;
            }
        }
        Ok(())
    }

    /// NaN/Inf guard for a recorded value (and its gradient if present).
    pub fn check_finite(&self, v: Var, context: &str) -> Result<(), CoreError> {
        if let Some(pos) = self.values[v.0].iter().position(|x| !x.is_finite()) {
            return Err(CoreError::NonFinite(format!(
                "{context}: value at flat index {pos} is {}",
                self.values[v.0][pos]
            )));
        }
        if let Some(g) = self.grads[v.0].as_ref() {
            if let Some(pos) = g.iter().position(|x| !x.is_finite()) {
                return Err(CoreError::NonFinite(format!(
                    "{context}: gradient at flat index {pos} is {}",
                    g[pos]
                )));
            }
        }
        Ok(())
    }

    // ---- ops ----------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, CoreError> {
        let (m, ka) = self.dims(a);
        let (kb, n) = self.dims(b);
        if ka != kb {
            return Err(CoreError::Shape(format!(
                "matmul: {m}x{ka} . {kb}x{n}"
            )));
        }
        let out = matmul_raw(&self.values[a.0], &self.values[b.0], m, ka, n);
        let track = self.tracked(a) || self.tracked(b);
        Ok(self.push(m, n, out, track, Op::Matmul { a: a.0, b: b.0 }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, CoreError> {
        let (r, c) = self.same_shape(a, b, "add")?;
        let out = zip_map(&self.values[a.0], &self.values[b.0], |x, y| x + y);
        let track = self.tracked(a) || self.tracked(b);
        Ok(self.push(r, c, out, track, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, CoreError> {
        let (r, c) = self.same_shape(a, b, "sub")?;
        let out = zip_map(&self.values[a.0], &self.values[b.0], |x, y| x - y);
        let track = self.tracked(a) || self.tracked(b);
        Ok(self.push(r, c, out, track, Op::Sub { a: a.0, b: b.0 }))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, CoreError> {
        let (r, c) = self.same_shape(a, b, "hadamard")?;
        let out = zip_map(&self.values[a.0], &self.values[b.0], |x, y| x * y);
        let track = self.tracked(a) || self.tracked(b);
        Ok(self.push(r, c, out, track, Op::Hadamard { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, CoreError> {
        let (r, cl) = self.dims(x);
        let out = self.values[x.0].iter().map(|v| v * c).collect();
        let track = self.tracked(x);
        Ok(self.push(r, cl, out, track, Op::Scale { x: x.0, c }))
    }

    /// Broadcast-add a 1 x d bias row to every row of an n x d matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var, CoreError> {
        let (n, d) = self.dims(x);
        let (br, bc) = self.dims(bias);
        if br != 1 || bc != d {
            return Err(CoreError::Shape(format!(
                "add_row_bias: bias {br}x{bc} for matrix {n}x{d}"
            )));
        }
        let b = &self.values[bias.0];
        let mut out = self.values[x.0].clone();
        for row in out.chunks_mut(d) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let track = self.tracked(x) || self.tracked(bias);
        Ok(self.push(n, d, out, track, Op::AddRowBias { x: x.0, bias: bias.0 }))
    }

    /// Multiply every entry by a 1 x 1 tensor (learnable scalar).
    pub fn scalar_mul(&mut self, x: Var, s: Var) -> Result<Var, CoreError> {
        let (r, c) = self.dims(x);
        if self.dims(s) != (1, 1) {
            return Err(CoreError::Shape("scalar_mul: scale must be 1x1".into()));
        }
        let sv = self.values[s.0][0];
        let out = self.values[x.0].iter().map(|v| v * sv).collect();
        let track = self.tracked(x) || self.tracked(s);
        Ok(self.push(r, c, out, track, Op::ScalarMul { x: x.0, s: s.0 }))
    }

    pub fn elu(&mut self, x: Var) -> Result<Var, CoreError> {
        let (r, c) = self.dims(x);
        let out = self.values[x.0]
            .iter()
            .map(|&v| if v > 0.0 { v } else { v.exp() - 1.0 })
            .collect();
        let track = self.tracked(x);
        Ok(self.push(r, c, out, track, Op::Elu { x: x.0 }))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var, CoreError> {
        let (r, c) = self.dims(x);
        let out = self.values[x.0]
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        let track = self.tracked(x);
        Ok(self.push(r, c, out, track, Op::LeakyRelu { x: x.0, slope }))
    }

    /// Inverted dropout: zero with probability p, scale survivors by
    /// 1/(1-p). Identity when `training` is false. The mask is a pure
    /// function of the key, independent of call order.
    pub fn dropout(&mut self, x: Var, p: f64, training: bool, key: DropoutKey) -> Result<Var, CoreError> {
        if !(0.0..1.0).contains(&p) {
            return Err(CoreError::Config(format!("dropout p={p} outside [0,1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let (r, c) = self.dims(x);
        let rng = KeyedRng::new(&[key.seed, key.site, key.step]);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..r * c)
            .map(|i| if rng.uniform_at(i as u64) < p { 0.0 } else { keep })
            .collect();
        let out = zip_map(&self.values[x.0], &mask, |v, m| v * m);
        let track = self.tracked(x);
        Ok(self.push(r, c, out, track, Op::Dropout { x: x.0, mask }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, CoreError> {
        if parts.is_empty() {
            return Err(CoreError::Contract("concat_cols: no inputs".into()));
        }
        let rows = self.dims(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != rows {
                return Err(CoreError::Shape(format!(
                    "concat_cols: {r} rows vs {rows}"
                )));
            }
            cols += c;
        }
        let mut out = vec![0.0; rows * cols];
        let mut offset = 0;
        for &p in parts {
            let (_, c) = self.dims(p);
            let vals = &self.values[p.0];
            for r in 0..rows {
                out[r * cols + offset..r * cols + offset + c]
                    .copy_from_slice(&vals[r * c..(r + 1) * c]);
            }
            offset += c;
        }
        let track = parts.iter().any(|&p| self.tracked(p));
        let ids = parts.iter().map(|p| p.0).collect();
        Ok(self.push(rows, cols, out, track, Op::ConcatCols { parts: ids }))
    }

    /// Gather rows by index (duplicates allowed).
    pub fn select_rows(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Result<Var, CoreError> {
        let (n, d) = self.dims(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(CoreError::Index(format!("select_rows: row {bad} >= {n}")));
        }
        let vals = &self.values[x.0];
        let mut out = vec![0.0; idx.len() * d];
        for (o, &r) in idx.iter().enumerate() {
            out[o * d..(o + 1) * d].copy_from_slice(&vals[r * d..(r + 1) * d]);
        }
        let track = self.tracked(x);
        Ok(self.push(idx.len(), d, out, track, Op::SelectRows { x: x.0, idx }))
    }

    /// Row v of the output is the sum of message rows whose destination is v.
    pub fn scatter_sum(&mut self, messages: Var, dsts: Arc<Vec<usize>>, n: usize) -> Result<Var, CoreError> {
        let (m, d) = self.dims(messages);
        if dsts.len() != m {
            return Err(CoreError::Shape(format!(
                "scatter_sum: {m} messages vs {} destinations",
                dsts.len()
            )));
        }
        if let Some(&bad) = dsts.iter().find(|&&v| v >= n) {
            return Err(CoreError::Index(format!("scatter_sum: dst {bad} >= {n}")));
        }
        let vals = &self.values[messages.0];
        let mut out = vec![0.0; n * d];
        for (e, &v) in dsts.iter().enumerate() {
            let row = &vals[e * d..(e + 1) * d];
            let o = &mut out[v * d..(v + 1) * d];
            for (ov, rv) in o.iter_mut().zip(row) {
                *ov += rv;
            }
        }
        let track = self.tracked(messages);
        Ok(self.push(n, d, out, track, Op::ScatterSum { messages: messages.0, dsts }))
    }

    /// Exp-normalizes logits within each destination segment (max-subtracted
    /// for stability). Empty segments simply have no entries.
    pub fn segment_softmax(&mut self, logits: Var, dsts: Arc<Vec<usize>>, n: usize) -> Result<Var, CoreError> {
        let (m, c) = self.dims(logits);
        if c != 1 {
            return Err(CoreError::Shape(format!("segment_softmax: logits {m}x{c}, need column")));
        }
        if dsts.len() != m {
            return Err(CoreError::Shape(format!(
                "segment_softmax: {m} logits vs {} destinations",
                dsts.len()
            )));
        }
        if let Some(&bad) = dsts.iter().find(|&&v| v >= n) {
            return Err(CoreError::Index(format!("segment_softmax: dst {bad} >= {n}")));
        }
        let vals = &self.values[logits.0];
        let mut seg_max = vec![f64::NEG_INFINITY; n];
        for (e, &v) in dsts.iter().enumerate() {
            seg_max[v] = seg_max[v].max(vals[e]);
        }
        let mut out = vec![0.0; m];
        let mut seg_sum = vec![0.0; n];
        for (e, &v) in dsts.iter().enumerate() {
            let w = (vals[e] - seg_max[v]).exp();
            out[e] = w;
            seg_sum[v] += w;
        }
        for (e, &v) in dsts.iter().enumerate() {
            out[e] /= seg_sum[v];
        }
        let track = self.tracked(logits);
        Ok(self.push(m, 1, out, track, Op::SegmentSoftmax { logits: logits.0, dsts }))
    }

    /// Rowwise dot product of two equal-shape matrices -> m x 1.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var, CoreError> {
        let (m, d) = self.same_shape(a, b, "row_dot")?;
        let av = &self.values[a.0];
        let bv = &self.values[b.0];
        let out = (0..m)
            .map(|r| {
                av[r * d..(r + 1) * d]
                    .iter()
                    .zip(&bv[r * d..(r + 1) * d])
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        let track = self.tracked(a) || self.tracked(b);
        Ok(self.push(m, 1, out, track, Op::RowDot { a: a.0, b: b.0 }))
    }

    /// Scales row r of x by the scalar s[r] (s is m x 1).
    pub fn row_mul(&mut self, x: Var, s: Var) -> Result<Var, CoreError> {
        let (m, d) = self.dims(x);
        if self.dims(s) != (m, 1) {
            return Err(CoreError::Shape(format!(
                "row_mul: scale {:?} for matrix {m}x{d}",
                self.dims(s)
            )));
        }
        let xv = &self.values[x.0];
        let sv = &self.values[s.0];
        let mut out = vec![0.0; m * d];
        for r in 0..m {
            let sc = sv[r];
            for j in 0..d {
                out[r * d + j] = xv[r * d + j] * sc;
            }
        }
        let track = self.tracked(x) || self.tracked(s);
        Ok(self.push(m, d, out, track, Op::RowMul { x: x.0, s: s.0 }))
    }

    /// Divides each row by sqrt(|row|^2 + eps).
    pub fn row_l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var, CoreError> {
        let (m, d) = self.dims(x);
        let xv = &self.values[x.0];
        let mut out = vec![0.0; m * d];
        for r in 0..m {
            let row = &xv[r * d..(r + 1) * d];
            let rad = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = row[j] / rad;
            }
        }
        let track = self.tracked(x);
        Ok(self.push(m, d, out, track, Op::RowL2Normalize { x: x.0, eps }))
    }

    /// Weighted sparse aggregation out[v] = sum over incoming edges (w,v) of
    /// weight_e * x[w]; the workhorse behind normalized-adjacency products.
    pub fn adj_matmul(&mut self, adj: &SparseAdj, x: Var) -> Result<Var, CoreError> {
        let (xr, d) = self.dims(x);
        let n = adj.offsets.len() - 1;
        if xr != n {
            return Err(CoreError::Shape(format!(
                "adj_matmul: adjacency over {n} nodes, features have {xr} rows"
            )));
        }
        if adj.srcs.len() != adj.weights.len() || *adj.offsets.last().unwrap() != adj.srcs.len() {
            return Err(CoreError::Shape("adj_matmul: inconsistent CSR arrays".into()));
        }
        let xv = &self.values[x.0];
        let compute_row = |v: usize, out_row: &mut [f64]| {
            for e in adj.offsets[v]..adj.offsets[v + 1] {
                let w = adj.weights[e];
                let src = &xv[adj.srcs[e] * d..(adj.srcs[e] + 1) * d];
                for (o, s) in out_row.iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        };
        let mut out = vec![0.0; n * d];
        if n * d >= PAR_THRESHOLD {
            out.par_chunks_mut(d).enumerate().for_each(|(v, row)| compute_row(v, row));
        } else {
            for (v, row) in out.chunks_mut(d).enumerate() {
                compute_row(v, row);
            }
        }
        let track = self.tracked(x);
        Ok(self.push(n, d, out, track, Op::AdjMatmul { x: x.0, adj: adj.clone() }))
    }

    /// Fused attention aggregation out[dst_e] += weight_e * values[src_e],
    /// differentiable in both the node values and the per-edge weights.
    /// Avoids materializing an |E| x d message matrix.
    pub fn attn_aggregate(
        &mut self,
        values: Var,
        weights: Var,
        srcs: Arc<Vec<usize>>,
        dsts: Arc<Vec<usize>>,
        n: usize,
    ) -> Result<Var, CoreError> {
        let (vn, d) = self.dims(values);
        let (m, wc) = self.dims(weights);
        if wc != 1 || m != srcs.len() || m != dsts.len() {
            return Err(CoreError::Shape(format!(
                "attn_aggregate: weights {m}x{wc}, {} srcs, {} dsts",
                srcs.len(),
                dsts.len()
            )));
        }
        if let Some(&bad) = srcs.iter().find(|&&v| v >= vn) {
            return Err(CoreError::Index(format!("attn_aggregate: src {bad} >= {vn}")));
        }
        if let Some(&bad) = dsts.iter().find(|&&v| v >= n) {
            return Err(CoreError::Index(format!("attn_aggregate: dst {bad} >= {n}")));
        }
        let xv = &self.values[values.0];
        let wv = &self.values[weights.0];
        let mut out = vec![0.0; n * d];
        for e in 0..m {
            let w = wv[e];
            let src = &xv[srcs[e] * d..(srcs[e] + 1) * d];
            let o = &mut out[dsts[e] * d..(dsts[e] + 1) * d];
            for (ov, sv) in o.iter_mut().zip(src) {
                *ov += w * sv;
            }
        }
        let track = self.tracked(values) || self.tracked(weights);
        Ok(self.push(
            n,
            d,
            out,
            track,
            Op::AttnAggregate { values: values.0, weights: weights.0, srcs, dsts },
        ))
    }

    /// Mean squared error over the masked rows (all columns).
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor, mask: Arc<Vec<usize>>) -> Result<Var, CoreError> {
        let (n, d) = self.dims(pred);
        if target.shape() != (n, d) {
            return Err(CoreError::Shape(format!(
                "mse_loss: pred {n}x{d} vs target {:?}",
                target.shape()
            )));
        }
        if mask.is_empty() {
            return Err(CoreError::Contract("mse_loss: empty row mask".into()));
        }
        if let Some(&bad) = mask.iter().find(|&&r| r >= n) {
            return Err(CoreError::Index(format!("mse_loss: row {bad} >= {n}")));
        }
        let pv = &self.values[pred.0];
        let tv = target.data();
        let count = (mask.len() * d) as f64;
        let mut acc = 0.0;
        for &r in mask.iter() {
            for j in 0..d {
                let diff = pv[r * d + j] - tv[r * d + j];
                acc += diff * diff;
            }
        }
        let track = self.tracked(pred);
        let target = Arc::new(tv.to_vec());
        Ok(self.push(1, 1, vec![acc / count], track, Op::MseLoss { pred: pred.0, target, mask }))
    }

    /// Mean negative log softmax probability of the true class over masked rows.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: Arc<Vec<usize>>,
        mask: Arc<Vec<usize>>,
    ) -> Result<Var, CoreError> {
        let (n, c) = self.dims(logits);
        if labels.len() != n {
            return Err(CoreError::Shape(format!(
                "cross_entropy: {} labels for {n} rows",
                labels.len()
            )));
        }
        if mask.is_empty() {
            return Err(CoreError::Contract("cross_entropy: empty row mask".into()));
        }
        if let Some(&bad) = mask.iter().find(|&&r| r >= n) {
            return Err(CoreError::Index(format!("cross_entropy: row {bad} >= {n}")));
        }
        if let Some(&bad) = mask.iter().map(|&r| labels[r]).find(|&l| l >= c) {
            return Err(CoreError::Index(format!("cross_entropy: label {bad} >= {c}")));
        }
        let lv = &self.values[logits.0];
        let mut probs = vec![0.0; mask.len() * c];
        let mut acc = 0.0;
        for (mi, &r) in mask.iter().enumerate() {
            let row = &lv[r * c..(r + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                probs[mi * c + j] = e;
                z += e;
            }
            for p in &mut probs[mi * c..(mi + 1) * c] {
                *p /= z;
            }
            acc -= probs[mi * c + labels[r]].ln();
        }
        let loss = acc / mask.len() as f64;
        let track = self.tracked(logits);
        Ok(self.push(1, 1, vec![loss], track, Op::CrossEntropy { logits: logits.0, labels, mask, probs }))
    }

    /// Sum of all entries -> 1 x 1.
    pub fn sum_all(&mut self, x: Var) -> Result<Var, CoreError> {
        let s = self.values[x.0].iter().sum();
        let track = self.tracked(x);
        Ok(self.push(1, 1, vec![s], track, Op::SumAll { x: x.0 }))
    }

    // ---- backward -----------------------------------------------------

    /// Propagates gradients from a scalar loss back through the recording.
    /// Each recorded op is visited exactly once, in reverse order. Calling
    /// this twice on one tape is an error.
    pub fn backward(&mut self, loss: Var) -> Result<(), CoreError> {
        if self.backward_done {
            return Err(CoreError::Contract(
                "backward already ran on this tape; rebuild the tape to differentiate again".into(),
            ));
        }
        let (r, c) = self.dims(loss);
        if (r, c) != (1, 1) {
            return Err(CoreError::Contract(format!(
                "backward requires a scalar loss, got {r}x{c}"
            )));
        }
        self.backward_done = true;
        if !self.metas[loss.0].track {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..self.metas.len()).rev() {
            if !self.metas[i].track || self.grads[i].is_none() {
                continue;
            }
            let g = self.grads[i].take().expect("checked above");
            self.apply_backward(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn ensure_grad(&mut self, id: usize) {
        if self.grads[id].is_none() {
            let m = &self.metas[id];
            self.grads[id] = Some(vec![0.0; m.rows * m.cols]);
        }
    }

    fn apply_backward(&mut self, i: usize, g: &[f64]) {
        // Ops only read `values` (immutable during backward) and accumulate
        // into input grads, one input at a time.
        macro_rules! grad_mut {
            ($id:expr) => {{
                self.ensure_grad($id);
                self.grads[$id].as_mut().expect("just ensured")
            }};
        }
        let op = std::mem::replace(&mut self.metas[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.metas[*a].rows, self.metas[*a].cols);
                let n = self.metas[*b].cols;
                if self.metas[*a].track {
                    let bv = self.values[*b].clone();
                    let ga = grad_mut!(*a);
                    // ga += g . b^T
                    matmul_at_bt(g, &bv, m, n, k, ga);
                }
                if self.metas[*b].track {
                    let av = self.values[*a].clone();
                    let gb = grad_mut!(*b);
                    // gb += a^T . g
                    for r in 0..m {
                        for p in 0..k {
                            let av_rp = av[r * k + p];
                            if av_rp != 0.0 {
                                let grow = &g[r * n..(r + 1) * n];
                                let gbrow = &mut gb[p * n..(p + 1) * n];
                                for (o, gv) in gbrow.iter_mut().zip(grow) {
                                    *o += av_rp * gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for &(id, _sign) in &[(*a, 1.0), (*b, 1.0)] {
                    if self.metas[id].track {
                        let gi = grad_mut!(id);
                        for (o, gv) in gi.iter_mut().zip(g) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.metas[*a].track {
                    let ga = grad_mut!(*a);
                    for (o, gv) in ga.iter_mut().zip(g) {
                        *o += gv;
                    }
                }
                if self.metas[*b].track {
                    let gb = grad_mut!(*b);
                    for (o, gv) in gb.iter_mut().zip(g) {
                        *o -= gv;
                    }
                }
            }
            Op::Hadamard { a, b } => {
                if self.metas[*a].track {
                    let bv = self.values[*b].clone();
                    let ga = grad_mut!(*a);
                    for ((o, gv), bvv) in ga.iter_mut().zip(g).zip(&bv) {
                        *o += gv * bvv;
                    }
                }
                if self.metas[*b].track {
                    let av = self.values[*a].clone();
                    let gb = grad_mut!(*b);
                    for ((o, gv), avv) in gb.iter_mut().zip(g).zip(&av) {
                        *o += gv * avv;
                    }
                }
            }
            Op::Scale { x, c } => {
                if self.metas[*x].track {
                    let c = *c;
                    let gx = grad_mut!(*x);
                    for (o, gv) in gx.iter_mut().zip(g) {
                        *o += c * gv;
                    }
                }
            }
            Op::AddRowBias { x, bias } => {
                let d = self.metas[i].cols;
                if self.metas[*x].track {
                    let gx = grad_mut!(*x);
                    for (o, gv) in gx.iter_mut().zip(g) {
                        *o += gv;
                    }
                }
                if self.metas[*bias].track {
                    let gb = grad_mut!(*bias);
                    for row in g.chunks(d) {
                        for (o, gv) in gb.iter_mut().zip(row) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::ScalarMul { x, s } => {
                let sv = self.values[*s][0];
                if self.metas[*x].track {
                    let gx = grad_mut!(*x);
                    for (o, gv) in gx.iter_mut().zip(g) {
                        *o += sv * gv;
                    }
                }
                if self.metas[*s].track {
                    let xv = self.values[*x].clone();
                    let gs = grad_mut!(*s);
                    gs[0] += g.iter().zip(&xv).map(|(gv, xvv)| gv * xvv).sum::<f64>();
                }
            }
            Op::Elu { x } => {
                if self.metas[*x].track {
                    let xv = self.values[*x].clone();
                    let gx = grad_mut!(*x);
                    for ((o, gv), xvv) in gx.iter_mut().zip(g).zip(&xv) {
                        let d = if *xvv > 0.0 { 1.0 } else { xvv.exp() };
                        *o += gv * d;
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                if self.metas[*x].track {
                    let slope = *slope;
                    let xv = self.values[*x].clone();
                    let gx = grad_mut!(*x);
                    for ((o, gv), xvv) in gx.iter_mut().zip(g).zip(&xv) {
                        *o += gv * if *xvv > 0.0 { 1.0 } else { slope };
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if self.metas[*x].track {
                    let gx = grad_mut!(*x);
                    for ((o, gv), m) in gx.iter_mut().zip(g).zip(mask) {
                        *o += gv * m;
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let cols = self.metas[i].cols;
                let rows = self.metas[i].rows;
                let mut offset = 0;
                for &p in parts {
                    let c = self.metas[p].cols;
                    if self.metas[p].track {
                        let gp = grad_mut!(p);
                        for r in 0..rows {
                            let src = &g[r * cols + offset..r * cols + offset + c];
                            let dst = &mut gp[r * c..(r + 1) * c];
                            for (o, gv) in dst.iter_mut().zip(src) {
                                *o += gv;
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::SelectRows { x, idx } => {
                if self.metas[*x].track {
                    let d = self.metas[i].cols;
                    let idx = idx.clone();
                    let gx = grad_mut!(*x);
                    for (o, &r) in idx.iter().enumerate() {
                        let src = &g[o * d..(o + 1) * d];
                        let dst = &mut gx[r * d..(r + 1) * d];
                        for (ov, gv) in dst.iter_mut().zip(src) {
                            *ov += gv;
                        }
                    }
                }
            }
            Op::ScatterSum { messages, dsts } => {
                if self.metas[*messages].track {
                    let d = self.metas[i].cols;
                    let dsts = dsts.clone();
                    let gm = grad_mut!(*messages);
                    for (e, &v) in dsts.iter().enumerate() {
                        let src = &g[v * d..(v + 1) * d];
                        let dst = &mut gm[e * d..(e + 1) * d];
                        for (ov, gv) in dst.iter_mut().zip(src) {
                            *ov += gv;
                        }
                    }
                }
            }
            Op::SegmentSoftmax { logits, dsts } => {
                if self.metas[*logits].track {
                    let y = self.values[i].clone();
                    let dsts = dsts.clone();
                    let n = dsts.iter().fold(0usize, |m, &v| m.max(v + 1));
                    let mut seg_dot = vec![0.0; n];
                    for (e, &v) in dsts.iter().enumerate() {
                        seg_dot[v] += g[e] * y[e];
                    }
                    let gl = grad_mut!(*logits);
                    for (e, &v) in dsts.iter().enumerate() {
                        gl[e] += y[e] * (g[e] - seg_dot[v]);
                    }
                }
            }
            Op::RowDot { a, b } => {
                let d = self.metas[*a].cols;
                if self.metas[*a].track {
                    let bv = self.values[*b].clone();
                    let ga = grad_mut!(*a);
                    for (r, gv) in g.iter().enumerate() {
                        for j in 0..d {
                            ga[r * d + j] += gv * bv[r * d + j];
                        }
                    }
                }
                if self.metas[*b].track {
                    let av = self.values[*a].clone();
                    let gb = grad_mut!(*b);
                    for (r, gv) in g.iter().enumerate() {
                        for j in 0..d {
                            gb[r * d + j] += gv * av[r * d + j];
                        }
                    }
                }
            }
            Op::RowMul { x, s } => {
                let d = self.metas[*x].cols;
                if self.metas[*x].track {
                    let sv = self.values[*s].clone();
                    let gx = grad_mut!(*x);
                    for (r, &sc) in sv.iter().enumerate() {
                        for j in 0..d {
                            gx[r * d + j] += g[r * d + j] * sc;
                        }
                    }
                }
                if self.metas[*s].track {
                    let xv = self.values[*x].clone();
                    let gs = grad_mut!(*s);
                    for (r, o) in gs.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for j in 0..d {
                            acc += g[r * d + j] * xv[r * d + j];
                        }
                        *o += acc;
                    }
                }
            }
            Op::RowL2Normalize { x, eps } => {
                if self.metas[*x].track {
                    let d = self.metas[*x].cols;
                    let eps = *eps;
                    let xv = self.values[*x].clone();
                    let gx = grad_mut!(*x);
                    let m = xv.len() / d;
                    for r in 0..m {
                        let row = &xv[r * d..(r + 1) * d];
                        let grow = &g[r * d..(r + 1) * d];
                        let s: f64 = row.iter().map(|v| v * v).sum();
                        let rad = (s + eps).sqrt();
                        let dot: f64 = row.iter().zip(grow).map(|(x, gv)| x * gv).sum();
                        let r3 = rad * rad * rad;
                        for j in 0..d {
                            gx[r * d + j] += grow[j] / rad - row[j] * dot / r3;
                        }
                    }
                }
            }
            Op::AdjMatmul { x, adj } => {
                if self.metas[*x].track {
                    let d = self.metas[i].cols;
                    let adj = adj.clone();
                    let gx = grad_mut!(*x);
                    let n = adj.offsets.len() - 1;
                    for v in 0..n {
                        let gr = &g[v * d..(v + 1) * d];
                        for e in adj.offsets[v]..adj.offsets[v + 1] {
                            let w = adj.weights[e];
                            let dst = &mut gx[adj.srcs[e] * d..(adj.srcs[e] + 1) * d];
                            for (o, gv) in dst.iter_mut().zip(gr) {
                                *o += w * gv;
                            }
                        }
                    }
                }
            }
            Op::AttnAggregate { values, weights, srcs, dsts } => {
                let d = self.metas[i].cols;
                if self.metas[*weights].track {
                    let xv = self.values[*values].clone();
                    let (srcs, dsts) = (srcs.clone(), dsts.clone());
                    let gw = grad_mut!(*weights);
                    for e in 0..srcs.len() {
                        let src = &xv[srcs[e] * d..(srcs[e] + 1) * d];
                        let gr = &g[dsts[e] * d..(dsts[e] + 1) * d];
                        gw[e] += src.iter().zip(gr).map(|(s, gv)| s * gv).sum::<f64>();
                    }
                }
                if self.metas[*values].track {
                    let wv = self.values[*weights].clone();
                    let (srcs, dsts) = (srcs.clone(), dsts.clone());
                    let gx = grad_mut!(*values);
                    for e in 0..srcs.len() {
                        let w = wv[e];
                        let gr = &g[dsts[e] * d..(dsts[e] + 1) * d];
                        let dst = &mut gx[srcs[e] * d..(srcs[e] + 1) * d];
                        for (o, gv) in dst.iter_mut().zip(gr) {
                            *o += w * gv;
                        }
                    }
                }
            }
            Op::MseLoss { pred, target, mask } => {
                if self.metas[*pred].track {
                    let d = self.metas[*pred].cols;
                    let pv = self.values[*pred].clone();
                    let (target, mask) = (target.clone(), mask.clone());
                    let count = (mask.len() * d) as f64;
                    let gp = grad_mut!(*pred);
                    let go = g[0];
                    for &r in mask.iter() {
                        for j in 0..d {
                            gp[r * d + j] += go * 2.0 * (pv[r * d + j] - target[r * d + j]) / count;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels, mask, probs } => {
                if self.metas[*logits].track {
                    let c = self.metas[*logits].cols;
                    let (labels, mask) = (labels.clone(), mask.clone());
                    let probs = probs.clone();
                    let inv = 1.0 / mask.len() as f64;
                    let gl = grad_mut!(*logits);
                    let go = g[0];
                    for (mi, &r) in mask.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if labels[r] == j { 1.0 } else { 0.0 };
                            gl[r * c + j] += go * (probs[mi * c + j] - onehot) * inv;
                        }
                    }
                }
            }
            Op::SumAll { x } => {
                if self.metas[*x].track {
                    let gx = grad_mut!(*x);
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
        }
        self.metas[i].op = op;
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize), CoreError> {
        let sa = self.dims(a);
        let sb = self.dims(b);
        if sa != sb {
            return Err(CoreError::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let row = |i: usize, out_row: &mut [f64]| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                for (o, bv) in out_row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD * 8 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, r)| row(i, r));
    } else {
        for (i, r) in out.chunks_mut(n).enumerate() {
            row(i, r);
        }
    }
    out
}

/// ga += g . b^T where g is m x n and b is k x n.
fn matmul_at_bt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize, ga: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let garow = &mut ga[i * k..(i + 1) * k];
        for (p, o) in garow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            *o += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::from_vec(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape.leaf(&tensor(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.leaf(&tensor(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let c = tape.matmul(i2, b).unwrap();
        assert_eq!(tape.values(c), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_hand_computed() {
        let mut tape = Tape::new();
        let a = tape.leaf(&tensor(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(&tensor(2, 1, &[1.0, 1.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.values(c), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(&tensor(2, 3, &[0.0; 6]));
        let b = tape.leaf(&tensor(2, 2, &[0.0; 4]));
        assert!(matches!(tape.matmul(a, b), Err(CoreError::Shape(_))));
    }

    #[test]
    fn scatter_sum_single_edge() {
        let mut tape = Tape::new();
        let msg = tape.leaf(&tensor(1, 2, &[1.0, 1.0]));
        let out = tape.scatter_sum(msg, Arc::new(vec![1]), 2).unwrap();
        assert_eq!(tape.values(out), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn scatter_sum_additivity() {
        let mut tape = Tape::new();
        let msg = tape.leaf(&tensor(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let out = tape.scatter_sum(msg, Arc::new(vec![0, 0]), 1).unwrap();
        assert_eq!(tape.values(out), &[4.0, 6.0]);
    }

    #[test]
    fn scatter_sum_index_error() {
        let mut tape = Tape::new();
        let msg = tape.leaf(&tensor(1, 1, &[1.0]));
        assert!(matches!(
            tape.scatter_sum(msg, Arc::new(vec![3]), 2),
            Err(CoreError::Index(_))
        ));
    }

    #[test]
    fn segment_softmax_singleton_and_pair() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&tensor(3, 1, &[5.0, 2.0, 2.0]));
        let w = tape.segment_softmax(logits, Arc::new(vec![0, 1, 1]), 2).unwrap();
        let v = tape.values(w);
        assert_eq!(v[0], 1.0);
        assert!((v[1] - 0.5).abs() < 1e-15);
        assert!((v[2] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn elu_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(1, 3, &[0.0, 1.0, -1.0]));
        let y = tape.elu(x).unwrap();
        let v = tape.values(y);
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], 1.0);
        assert!((v[2] - ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn dropout_degenerate_and_reproducible() {
        let key = DropoutKey { seed: 9, site: 1, step: 4 };
        let t = tensor(4, 4, &[1.0; 16]);
        let mut tape = Tape::new();
        let x = tape.leaf(&t);
        let y = tape.dropout(x, 0.0, true, key).unwrap();
        assert_eq!(y, x); // p = 0 is the identity

        let run = |k: DropoutKey| {
            let mut tp = Tape::new();
            let x = tp.leaf(&t);
            let y = tp.dropout(x, 0.5, true, k).unwrap();
            tp.values(y).to_vec()
        };
        assert_eq!(run(key), run(key));
        assert_ne!(run(key), run(DropoutKey { seed: 9, site: 1, step: 5 }));

        let mut tape = Tape::new();
        let x = tape.leaf(&t);
        assert!(matches!(
            tape.dropout(x, 1.0, true, key),
            Err(CoreError::Config(_))
        ));
    }

    #[test]
    fn mse_hand_computed_with_grad() {
        let mut tape = Tape::new();
        let pred = tape.leaf(&tensor(1, 1, &[2.0]).with_grad());
        let loss = tape
            .mse_loss(pred, &tensor(1, 1, &[0.0]), Arc::new(vec![0]))
            .unwrap();
        assert_eq!(tape.scalar(loss).unwrap(), 4.0);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(pred).unwrap(), &[4.0]);
    }

    #[test]
    fn mse_zero_when_equal() {
        let mut tape = Tape::new();
        let t = tensor(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let pred = tape.leaf(&t);
        let loss = tape.mse_loss(pred, &t, Arc::new(vec![0, 1, 2])).unwrap();
        assert_eq!(tape.scalar(loss).unwrap(), 0.0);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&tensor(1, 4, &[0.3, 0.3, 0.3, 0.3]));
        let loss = tape
            .cross_entropy(logits, Arc::new(vec![2]), Arc::new(vec![0]))
            .unwrap();
        assert!((tape.scalar(loss).unwrap() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_large_margin() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&tensor(1, 3, &[20.0, 0.0, 0.0]));
        let loss = tape
            .cross_entropy(logits, Arc::new(vec![0]), Arc::new(vec![0]))
            .unwrap();
        assert!(tape.scalar(loss).unwrap() < 1e-8);
    }

    #[test]
    fn sum_all_grad_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(3, 1, &[5.0, -1.0, 2.0]).with_grad());
        let s = tape.sum_all(x).unwrap();
        assert_eq!(tape.scalar(s).unwrap(), 6.0);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_twice_is_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(1, 1, &[3.0]).with_grad());
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(CoreError::Contract(_))));
    }

    #[test]
    fn backward_on_non_scalar_is_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(2, 1, &[3.0, 1.0]).with_grad());
        assert!(matches!(tape.backward(x), Err(CoreError::Contract(_))));
    }

    #[test]
    fn forward_without_dropout_is_bitwise_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(&tensor(3, 2, &[0.3, -1.2, 2.0, 0.7, -0.4, 1.1]));
            let w = tape.leaf(&tensor(2, 2, &[0.5, -0.25, 1.5, 0.125]));
            let h = tape.matmul(x, w).unwrap();
            let a = tape.elu(h).unwrap();
            let s = tape.sum_all(a).unwrap();
            tape.scalar(s).unwrap()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
