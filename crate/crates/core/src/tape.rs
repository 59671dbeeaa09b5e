//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is an append-only list of nodes. Every node stores its forward
//! value; parents always precede children, so a single reverse sweep
//! computes all gradients. Leaves may borrow their value (model parameters
//! are not copied per forward pass).

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, softmax_into, Tensor, MASK_SENTINEL};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CausalMask(NodeId),
    Softmax(NodeId),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    Override(NodeId),
    Sum(NodeId),
    CrossEntropy {
        logits: NodeId,
        picks: Vec<(usize, usize)>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node<'a> {
    op: Op,
    value: Cow<'a, Tensor>,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Tensor>>,
    differentiated: bool,
}

impl<'a> Tape<'a> {
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

    pub fn is_tracked(&self, id: NodeId) -> bool {
        self.nodes[id.0].tracked
    }

    /// Gradient of the last backward's loss with respect to `id`, if the node
    /// is tracked and received any.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Forget gradients so `backward` may run again.
    pub fn reset(&mut self) {
        self.grads.clear();
        self.differentiated = false;
    }

    pub fn leaf(&mut self, value: Tensor, tracked: bool) -> NodeId {
        self.push(Op::Leaf, Cow::Owned(value), tracked)
    }

    pub fn leaf_ref(&mut self, value: &'a Tensor, tracked: bool) -> NodeId {
        self.push(Op::Leaf, Cow::Borrowed(value), tracked)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    fn push(&mut self, op: Op, value: Cow<'a, Tensor>, tracked: bool) -> NodeId {
        self.nodes.push(Node { op, value, tracked });
        NodeId(self.nodes.len() - 1)
    }

    fn any_tracked(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].tracked)
    }

    fn derived(&mut self, op: Op, value: Tensor, parents: &[NodeId]) -> NodeId {
        let tracked = self.any_tracked(parents);
        self.push(op, Cow::Owned(value), tracked)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.derived(Op::MatMul(a, b), v, &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.derived(Op::MatMulNt(a, b), v, &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        va.expect_same_shape(vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let v = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.derived(Op::Add(a, b), v, &[a, b]))
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let c = vx.cols();
        if vb.len() != c {
            return Err(Error::Dimension(format!(
                "row bias of length {} does not match {c} columns",
                vb.len()
            )));
        }
        let mut v = vx.clone();
        for r in 0..v.rows() {
            for (o, b) in v.row_mut(r).iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        Ok(self.derived(Op::AddRow(x, bias), v, &[x, bias]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        va.expect_same_shape(vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let v = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.derived(Op::Mul(a, b), v, &[a, b]))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x).map(|t| t * c);
        self.derived(Op::Scale(x, c), v, &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(gelu);
        self.derived(Op::Gelu(x), v, &[x])
    }

    /// Row-wise layer normalisation with affine scale and shift.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let (rows, cols) = (vx.rows(), vx.cols());
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.len() != cols || b.len() != cols {
            return Err(Error::Dimension("layer norm parameters do not match width".into()));
        }
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g.data()[c] + b.data()[c];
            }
        }
        let v = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.derived(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            v,
            &[x, gamma, beta],
        ))
    }

    /// Writes [`MASK_SENTINEL`] into every entry above the diagonal.
    pub fn causal_mask(&mut self, z: NodeId) -> Result<NodeId> {
        let mut v = self.value(z).clone();
        if v.shape().len() != 2 {
            return Err(Error::Dimension("causal mask needs a matrix".into()));
        }
        for i in 0..v.rows() {
            for x in v.row_mut(i).iter_mut().skip(i + 1) {
                *x = MASK_SENTINEL;
            }
        }
        Ok(self.derived(Op::CausalMask(z), v, &[z]))
    }

    pub fn softmax_rows(&mut self, z: NodeId) -> Result<NodeId> {
        let v = self.value(z).softmax_rows()?;
        Ok(self.derived(Op::Softmax(z), v, &[z]))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, width: usize) -> Result<NodeId> {
        let vx = self.value(x);
        let cols = vx.cols();
        if width == 0 || start + width > cols {
            return Err(Error::Dimension(format!(
                "column slice {start}..{} out of 0..{cols}",
                start + width
            )));
        }
        let rows = vx.rows();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&vx.row(r)[start..start + width]);
        }
        let v = Tensor::matrix(rows, width, data)?;
        Ok(self.derived(Op::SliceCols { x, start }, v, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
        let rows = self.value(*first).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::Dimension("concat_cols row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let v = Tensor::matrix(rows, cols, data)?;
        Ok(self.derived(Op::ConcatCols(parts.to_vec()), v, parts))
    }

    /// Selects rows of `table` (embedding lookup).
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let vt = self.value(table);
        let (n, cols) = (vt.rows(), vt.cols());
        if ids.is_empty() {
            return Err(Error::Dimension("gather of no rows".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= n {
                return Err(Error::Dimension(format!("row {id} outside table of {n} rows")));
            }
            data.extend_from_slice(vt.row(id));
        }
        let v = Tensor::matrix(ids.len(), cols, data)?;
        Ok(self.derived(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            v,
            &[table],
        ))
    }

    /// Replaces the value of `x` with an externally computed tensor of the
    /// same shape. Gradients pass straight through to `x`.
    pub fn override_value(&mut self, x: NodeId, value: Tensor) -> Result<NodeId> {
        self.value(x).expect_same_shape(&value)?;
        Ok(self.derived(Op::Override(x), value, &[x]))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        self.derived(Op::Sum(x), v, &[x])
    }

    /// Mean cross-entropy of `logits` rows against class targets over the
    /// listed `(row, class)` picks.
    pub fn cross_entropy(&mut self, logits: NodeId, picks: &[(usize, usize)]) -> Result<NodeId> {
        if picks.is_empty() {
            return Err(Error::Contract("cross-entropy over no positions".into()));
        }
        let vl = self.value(logits);
        let (rows, cols) = (vl.rows(), vl.cols());
        let mut probs = vec![0.0; picks.len() * cols];
        let mut total = 0.0;
        for (k, &(r, c)) in picks.iter().enumerate() {
            if r >= rows || c >= cols {
                return Err(Error::Dimension(format!(
                    "cross-entropy pick ({r}, {c}) outside {rows}x{cols} logits"
                )));
            }
            let p = &mut probs[k * cols..(k + 1) * cols];
            softmax_into(vl.row(r), p).map_err(|_| Error::DegenerateRow { row: r })?;
            let row = vl.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[c];
        }
        let v = Tensor::scalar(total / picks.len() as f64);
        Ok(self.derived(
            Op::CrossEntropy {
                logits,
                picks: picks.to_vec(),
                probs,
            },
            v,
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar node. Fills gradients for every tracked
    /// node; a second call without [`Tape::reset`] is an error.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.differentiated {
            return Err(Error::Contract("backward already ran on this tape; reset it first".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.differentiated = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.is_tracked(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g)?;
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: Tensor) {
        if !self.nodes[id.0].tracked {
            return;
        }
        match &mut self.grads[id.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].tracked
    }

    fn propagate(&mut self, idx: usize, g: &Tensor) -> Result<()> {
        // Borrow the op immutably while computing deltas, then accumulate.
        let mut deltas: Vec<(NodeId, Tensor)> = Vec::with_capacity(3);
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if self.wants(a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(g.data(), vb.data(), &mut da, m, n, k);
                    deltas.push((a, Tensor::new(va.shape().to_vec(), da)?));
                }
                if self.wants(b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(va.data(), g.data(), &mut db, m, k, n);
                    deltas.push((b, Tensor::new(vb.shape().to_vec(), db)?));
                }
            }
            &Op::MatMulNt(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                let (m, k, n) = (va.rows(), va.cols(), vb.rows());
                if self.wants(a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nn(g.data(), vb.data(), &mut da, m, n, k);
                    deltas.push((a, Tensor::new(va.shape().to_vec(), da)?));
                }
                if self.wants(b) {
                    let mut db = vec![0.0; n * k];
                    gemm_tn(g.data(), va.data(), &mut db, m, n, k);
                    deltas.push((b, Tensor::new(vb.shape().to_vec(), db)?));
                }
            }
            &Op::Add(a, b) => {
                deltas.push((a, g.clone()));
                deltas.push((b, g.clone()));
            }
            &Op::AddRow(x, bias) => {
                deltas.push((x, g.clone()));
                if self.wants(bias) {
                    let mut db = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        for (d, v) in db.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    deltas.push((bias, Tensor::new(self.value(bias).shape().to_vec(), db)?));
                }
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                if self.wants(a) {
                    let d = g.data().iter().zip(vb.data()).map(|(g, y)| g * y).collect();
                    deltas.push((a, Tensor::new(va.shape().to_vec(), d)?));
                }
                if self.wants(b) {
                    let d = g.data().iter().zip(va.data()).map(|(g, x)| g * x).collect();
                    deltas.push((b, Tensor::new(vb.shape().to_vec(), d)?));
                }
            }
            &Op::Scale(x, c) => deltas.push((x, g.map(|v| v * c))),
            &Op::Gelu(x) => {
                let vx = self.value(x);
                let d = g.data().iter().zip(vx.data()).map(|(g, &x)| g * gelu_grad(x)).collect();
                deltas.push((x, Tensor::new(vx.shape().to_vec(), d)?));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let vg = self.value(gamma);
                let (rows, cols) = (g.rows(), g.cols());
                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                let mut dx = vec![0.0; rows * cols];
                let n = cols as f64;
                for r in 0..rows {
                    let gr = g.row(r);
                    let hr = &xhat[r * cols..(r + 1) * cols];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for c in 0..cols {
                        dgamma[c] += gr[c] * hr[c];
                        dbeta[c] += gr[c];
                        let dh = gr[c] * vg.data()[c];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[c];
                    }
                    for c in 0..cols {
                        let dh = gr[c] * vg.data()[c];
                        dx[r * cols + c] = inv_std[r] / n * (n * dh - sum_dh - hr[c] * sum_dh_h);
                    }
                }
                deltas.push((x, Tensor::new(self.value(x).shape().to_vec(), dx)?));
                deltas.push((gamma, Tensor::new(vg.shape().to_vec(), dgamma)?));
                deltas.push((beta, Tensor::new(self.value(beta).shape().to_vec(), dbeta)?));
            }
            &Op::CausalMask(z) => {
                let mut d = g.clone();
                for i in 0..d.rows() {
                    for x in d.row_mut(i).iter_mut().skip(i + 1) {
                        *x = 0.0;
                    }
                }
                deltas.push((z, d));
            }
            &Op::Softmax(z) => {
                let y = &node.value;
                let mut d = g.clone();
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let dot: f64 = g.row(r).iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (dv, (&gv, &yv)) in d.row_mut(r).iter_mut().zip(g.row(r).iter().zip(yr)) {
                        *dv = yv * (gv - dot);
                    }
                }
                deltas.push((z, d));
            }
            &Op::SliceCols { x, start } => {
                let vx = self.value(x);
                let mut d = Tensor::zeros(vx.shape());
                let w = g.cols();
                for r in 0..g.rows() {
                    d.row_mut(r)[start..start + w].copy_from_slice(g.row(r));
                }
                deltas.push((x, d));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let vp = self.value(p);
                    let w = vp.cols();
                    let mut d = Vec::with_capacity(vp.len());
                    for r in 0..g.rows() {
                        d.extend_from_slice(&g.row(r)[offset..offset + w]);
                    }
                    offset += w;
                    deltas.push((p, Tensor::new(vp.shape().to_vec(), d)?));
                }
            }
            Op::Gather { table, ids } => {
                let table = *table;
                if self.wants(table) {
                    let mut d = Tensor::zeros(self.value(table).shape());
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, v) in d.row_mut(id).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    deltas.push((table, d));
                }
            }
            &Op::Override(x) => deltas.push((x, g.clone())),
            &Op::Sum(x) => {
                let s = g.data()[0];
                deltas.push((x, Tensor::full(self.value(x).shape(), s)));
            }
            Op::CrossEntropy {
                logits,
                picks,
                probs,
            } => {
                let logits = *logits;
                let vl = self.value(logits);
                let cols = vl.cols();
                let scale = g.data()[0] / picks.len() as f64;
                let mut d = Tensor::zeros(vl.shape());
                for (k, &(r, c)) in picks.iter().enumerate() {
                    let p = &probs[k * cols..(k + 1) * cols];
                    let row = d.row_mut(r);
                    for (o, &pv) in row.iter_mut().zip(p) {
                        *o += scale * pv;
                    }
                    row[c] -= scale;
                }
                deltas.push((logits, d));
            }
        }
        for (id, d) in deltas {
            self.accumulate(id, d);
        }
        Ok(())
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap(), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![3.0]).unwrap(), true);
        let xx = tape.mul(x, x).unwrap();
        let s = tape.sum(xx);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn second_backward_requires_reset() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap(), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Contract(_))));
        tape.reset();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap(), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn untracked_inputs_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap(), true);
        let c = tape.constant(Tensor::vector(vec![5.0, 6.0]).unwrap());
        let p = tape.mul(x, c).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[5.0, 6.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn masked_softmax_zeroes_upper_triangle() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::matrix(2, 2, vec![0.3, 0.7, -1.0, 2.0]).unwrap(), true);
        let m = tape.causal_mask(z).unwrap();
        let a = tape.softmax_rows(m).unwrap();
        assert_eq!(tape.value(a).data(), &[1.0, 0.0, tape.value(a).at(1, 0), tape.value(a).at(1, 1)]);
        let s = tape.sum(a);
        tape.backward(s).unwrap();
        // Rows sum to one, so the gradient of their total vanishes.
        assert!(tape.grad(z).unwrap().data().iter().all(|g| g.abs() < 1e-15));
    }
}
