use std::collections::BTreeMap;

use crate::error::{CoreError, Result};
use crate::numerics::{Matrix, ParamId, ParamStore};

/// Index of a node on the tape.
pub type NodeId = usize;

/// Recorded operation. Every operand references an earlier node, so the tape
/// is topologically ordered by construction and cycles are unrepresentable.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// Forward identity that never propagates gradient; the input edge is
    /// deliberately not recorded.
    StopGrad,
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Hadamard { a: NodeId, b: NodeId },
    MatMul { a: NodeId, b: NodeId },
    /// out = a * b^T
    MatMulTransB { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    /// out = x * s where s is 1x1
    ScaleByScalar { x: NodeId, s: NodeId },
    /// out[t, c] = x[t, c] + row[0, c]
    AddRowBroadcast { x: NodeId, row: NodeId },
    /// out = x + s where s is 1x1
    AddScalarBroadcast { x: NodeId, s: NodeId },
    /// out[t, c] = x[t, c] * col[t, 0]
    MulColBroadcast { x: NodeId, col: NodeId },
    /// out = x + C for a constant matrix folded in at record time
    AddConst { x: NodeId },
    SoftmaxRows { x: NodeId },
    LayerNormRows { x: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    Tanh { x: NodeId },
    Sigmoid { x: NodeId },
    /// Per-row entropy of a probability matrix, normalized by ln(cols).
    RowEntropyNorm { x: NodeId },
    RowSum { x: NodeId },
    MeanRows { x: NodeId },
    SumAll { x: NodeId },
    GatherRows { table: NodeId, idx: Vec<usize> },
    SliceCols { x: NodeId, start: usize },
    SliceRows { x: NodeId, start: usize },
    ConcatCols { parts: Vec<NodeId> },
    ConcatRows { parts: Vec<NodeId> },
    /// Linear time interpolation with aligned endpoints.
    ResampleRows { x: NodeId },
    /// Mean over rows of -log softmax(logits)[target]; probs cached for backward.
    CrossEntropyMeanRows { logits: NodeId, targets: Vec<usize>, probs: Matrix },
}

/// Reverse-mode autodiff tape over [`Matrix`] values.
///
/// Forward calls record one node per operation; [`Tape::backward`] replays
/// the record in reverse accumulating vector-Jacobian products. Gradient
/// never flows into a node created by [`Tape::stop_grad`] or into leaves
/// that do not require gradients, and "never flows" means the accumulator
/// is left untouched, so frozen parameters read back bitwise-zero grads.
pub struct Tape {
    values: Vec<Matrix>,
    ops: Vec<Op>,
    needs: Vec<bool>,
    grads: Vec<Option<Matrix>>,
    bound: BTreeMap<ParamId, (NodeId, NodeId)>, // (leaf, possibly stop-wrapped handle)
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { values: Vec::new(), ops: Vec::new(), needs: Vec::new(), grads: Vec::new(), bound: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.values[id]
    }

    pub fn grad(&self, id: NodeId) -> Option<&Matrix> {
        self.grads[id].as_ref()
    }

    fn push(&mut self, value: Matrix, op: Op, needs: bool) -> NodeId {
        let id = self.values.len();
        self.values.push(value);
        self.ops.push(op);
        self.needs.push(needs);
        self.grads.push(None);
        id
    }

    /// A constant: gradient is never tracked through it.
    pub fn constant(&mut self, m: Matrix) -> NodeId {
        self.push(m, Op::Leaf, false)
    }

    pub fn leaf(&mut self, m: Matrix, needs_grad: bool) -> NodeId {
        self.push(m, Op::Leaf, needs_grad)
    }

    /// Bind a stored parameter. The same parameter binds to one node per
    /// tape, so repeated uses share gradient accumulation. A parameter
    /// carrying the `stop_grad` flag is wrapped so consumers see a constant.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&(_, handle)) = self.bound.get(&id) {
            return handle;
        }
        let p = store.get(id);
        let leaf = self.push(p.value.clone(), Op::Leaf, p.requires_grad);
        let handle = if p.stop_grad { self.stop_grad(leaf) } else { leaf };
        self.bound.insert(id, (leaf, handle));
        handle
    }

    /// Identity in the forward pass; absorbs all gradient in the backward pass.
    pub fn stop_grad(&mut self, x: NodeId) -> NodeId {
        let v = self.values[x].clone();
        self.push(v, Op::StopGrad, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.values[a].add(&self.values[b]);
        let needs = self.needs[a] || self.needs[b];
        self.push(v, Op::Add { a, b }, needs)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.values[a].sub(&self.values[b]);
        let needs = self.needs[a] || self.needs[b];
        self.push(v, Op::Sub { a, b }, needs)
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.values[a].hadamard(&self.values[b]);
        let needs = self.needs[a] || self.needs[b];
        self.push(v, Op::Hadamard { a, b }, needs)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.values[a].matmul(&self.values[b]);
        let needs = self.needs[a] || self.needs[b];
        self.push(v, Op::MatMul { a, b }, needs)
    }

    pub fn matmul_transb(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.values[a].matmul_transb(&self.values[b]);
        let needs = self.needs[a] || self.needs[b];
        self.push(v, Op::MatMulTransB { a, b }, needs)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.values[x].scale(c);
        let needs = self.needs[x];
        self.push(v, Op::Scale { x, c }, needs)
    }

    pub fn scale_by_scalar(&mut self, x: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.values[s].shape(), (1, 1), "scale_by_scalar: s must be 1x1");
        let v = self.values[x].scale(self.values[s].item());
        let needs = self.needs[x] || self.needs[s];
        self.push(v, Op::ScaleByScalar { x, s }, needs)
    }

    pub fn add_row_broadcast(&mut self, x: NodeId, row: NodeId) -> NodeId {
        let (xr, xc) = self.values[x].shape();
        assert_eq!(self.values[row].shape(), (1, xc), "add_row_broadcast: row shape");
        let mut v = self.values[x].clone();
        for t in 0..xr {
            let r = self.values[row].row(0).to_vec();
            for (o, b) in v.row_mut(t).iter_mut().zip(r) {
                *o += b;
            }
        }
        let needs = self.needs[x] || self.needs[row];
        self.push(v, Op::AddRowBroadcast { x, row }, needs)
    }

    pub fn add_scalar_broadcast(&mut self, x: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.values[s].shape(), (1, 1), "add_scalar_broadcast: s must be 1x1");
        let sv = self.values[s].item();
        let v = self.values[x].map(|a| a + sv);
        let needs = self.needs[x] || self.needs[s];
        self.push(v, Op::AddScalarBroadcast { x, s }, needs)
    }

    pub fn mul_col_broadcast(&mut self, x: NodeId, col: NodeId) -> NodeId {
        let (xr, _) = self.values[x].shape();
        assert_eq!(self.values[col].shape(), (xr, 1), "mul_col_broadcast: col shape");
        let mut v = self.values[x].clone();
        for t in 0..xr {
            let c = self.values[col][(t, 0)];
            for o in v.row_mut(t) {
                *o *= c;
            }
        }
        let needs = self.needs[x] || self.needs[col];
        self.push(v, Op::MulColBroadcast { x, col }, needs)
    }

    /// Add a constant matrix (e.g. an attention mask of 0 / -1e30 entries).
    pub fn add_const(&mut self, x: NodeId, c: &Matrix) -> NodeId {
        let v = self.values[x].add(c);
        let needs = self.needs[x];
        self.push(v, Op::AddConst { x }, needs)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let v = softmax_rows_kernel(&self.values[x]);
        let needs = self.needs[x];
        self.push(v, Op::SoftmaxRows { x }, needs)
    }

    pub fn layer_norm_rows(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        assert!(eps > 0.0, "layer_norm: eps must be positive");
        let xc = self.values[x].cols();
        assert_eq!(self.values[gain].shape(), (1, xc), "layer_norm: gain shape");
        assert_eq!(self.values[bias].shape(), (1, xc), "layer_norm: bias shape");
        let v = layer_norm_kernel(&self.values[x], &self.values[gain], &self.values[bias], eps);
        let needs = self.needs[x] || self.needs[gain] || self.needs[bias];
        self.push(v, Op::LayerNormRows { x, gain, bias, eps }, needs)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.values[x].map(f64::tanh);
        let needs = self.needs[x];
        self.push(v, Op::Tanh { x }, needs)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.values[x].map(sigmoid);
        let needs = self.needs[x];
        self.push(v, Op::Sigmoid { x }, needs)
    }

    /// Rows must be probability distributions. Output is T x 1 with
    /// S_t = -sum_c p ln p / ln(cols); zero entries contribute zero, and a
    /// single-column input is defined to have S = 0.
    pub fn row_entropy_norm(&mut self, x: NodeId) -> NodeId {
        let v = row_entropy_kernel(&self.values[x]);
        let needs = self.needs[x];
        self.push(v, Op::RowEntropyNorm { x }, needs)
    }

    pub fn row_sum(&mut self, x: NodeId) -> NodeId {
        let xm = &self.values[x];
        let v = Matrix::from_fn(xm.rows(), 1, |t, _| xm.row(t).iter().sum());
        let needs = self.needs[x];
        self.push(v, Op::RowSum { x }, needs)
    }

    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let xm = &self.values[x];
        let t = xm.rows() as f64;
        let mut v = Matrix::zeros(1, xm.cols());
        for r in 0..xm.rows() {
            for (o, a) in v.row_mut(0).iter_mut().zip(xm.row(r)) {
                *o += a;
            }
        }
        for o in v.as_mut_slice() {
            *o /= t;
        }
        let needs = self.needs[x];
        self.push(v, Op::MeanRows { x }, needs)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = Matrix::scalar(self.values[x].sum());
        let needs = self.needs[x];
        self.push(v, Op::SumAll { x }, needs)
    }

    pub fn gather_rows(&mut self, table: NodeId, idx: &[usize]) -> NodeId {
        let tm = &self.values[table];
        for &i in idx {
            assert!(i < tm.rows(), "gather_rows: index {i} out of {}", tm.rows());
        }
        let v = Matrix::from_fn(idx.len(), tm.cols(), |t, c| tm[(idx[t], c)]);
        let needs = self.needs[table];
        self.push(v, Op::GatherRows { table, idx: idx.to_vec() }, needs)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xm = &self.values[x];
        assert!(start + len <= xm.cols(), "slice_cols out of range");
        let v = Matrix::from_fn(xm.rows(), len, |t, c| xm[(t, start + c)]);
        let needs = self.needs[x];
        self.push(v, Op::SliceCols { x, start }, needs)
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xm = &self.values[x];
        assert!(start + len <= xm.rows(), "slice_rows out of range");
        let v = Matrix::from_fn(len, xm.cols(), |t, c| xm[(start + t, c)]);
        let needs = self.needs[x];
        self.push(v, Op::SliceRows { x, start }, needs)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.values[parts[0]].rows();
        let total: usize = parts.iter().map(|&p| self.values[p].cols()).sum();
        let mut v = Matrix::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let pm = &self.values[p];
            assert_eq!(pm.rows(), rows, "concat_cols: row mismatch");
            for t in 0..rows {
                for c in 0..pm.cols() {
                    v[(t, off + c)] = pm[(t, c)];
                }
            }
            off += pm.cols();
        }
        let needs = parts.iter().any(|&p| self.needs[p]);
        self.push(v, Op::ConcatCols { parts: parts.to_vec() }, needs)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let mats: Vec<&Matrix> = parts.iter().map(|&p| &self.values[p]).collect();
        let v = Matrix::vstack(&mats);
        let needs = parts.iter().any(|&p| self.needs[p]);
        self.push(v, Op::ConcatRows { parts: parts.to_vec() }, needs)
    }

    /// Linear interpolation along the row (time) axis with aligned endpoints.
    /// `t_out == rows(x)` reproduces the input exactly.
    pub fn resample_rows(&mut self, x: NodeId, t_out: usize) -> NodeId {
        assert!(t_out >= 1, "resample_rows: target length must be >= 1");
        let xm = &self.values[x];
        let mut v = Matrix::zeros(t_out, xm.cols());
        for (i, (lo, hi, w)) in resample_weights(xm.rows(), t_out).into_iter().enumerate() {
            for c in 0..xm.cols() {
                v[(i, c)] = (1.0 - w) * xm[(lo, c)] + w * xm[(hi, c)];
            }
        }
        let needs = self.needs[x];
        self.push(v, Op::ResampleRows { x }, needs)
    }

    /// Token-level cross entropy, averaged over rows.
    pub fn cross_entropy_mean_rows(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let lm = &self.values[logits];
        assert_eq!(lm.rows(), targets.len(), "cross_entropy: target count");
        for &t in targets {
            assert!(t < lm.cols(), "cross_entropy: target {t} out of {}", lm.cols());
        }
        let probs = softmax_rows_kernel(lm);
        let mut total = 0.0;
        for (t, &tgt) in targets.iter().enumerate() {
            // ln of a stabilized softmax entry; recompute from logits for accuracy
            let row = lm.row(t);
            let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let logsum = row.iter().map(|&z| (z - maxv).exp()).sum::<f64>().ln() + maxv;
            total += logsum - row[tgt];
        }
        let v = Matrix::scalar(total / targets.len() as f64);
        let needs = self.needs[logits];
        self.push(v, Op::CrossEntropyMeanRows { logits, targets: targets.to_vec(), probs }, needs)
    }

    /// Backpropagate from a scalar loss node, filling gradient accumulators.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let lv = &self.values[loss];
        if lv.shape() != (1, 1) {
            return Err(CoreError::ShapeMismatch(format!(
                "backward: loss must be 1x1, got {}x{}",
                lv.rows(),
                lv.cols()
            )));
        }
        lv.ensure_finite("backward: loss")?;
        if self.grads[loss].is_none() {
            self.grads[loss] = Some(Matrix::scalar(1.0));
        }

        let Tape { values, ops, needs, grads, .. } = self;
        for i in (0..values.len()).rev() {
            if !needs[i] || grads[i].is_none() {
                continue;
            }
            let (lo, hi) = grads.split_at_mut(i);
            let gout = hi[0].as_ref().expect("checked above");
            backward_op(&ops[i], values, needs, lo, gout);
        }
        Ok(())
    }

    /// Accumulate node gradients back into the parameter store.
    pub fn export_grads(&self, store: &mut ParamStore) {
        for (&pid, &(leaf, _)) in &self.bound {
            if let Some(g) = &self.grads[leaf] {
                store.get_mut(pid).grad.add_assign(g);
            }
        }
    }
}

fn acc(slot: &mut Option<Matrix>, rows: usize, cols: usize) -> &mut Matrix {
    slot.get_or_insert_with(|| Matrix::zeros(rows, cols))
}

fn backward_op(op: &Op, values: &[Matrix], needs: &[bool], grads: &mut [Option<Matrix>], gout: &Matrix) {
    match *op {
        Op::Leaf | Op::StopGrad => {}
        Op::Add { a, b } => {
            if needs[a] {
                acc(&mut grads[a], gout.rows(), gout.cols()).add_assign(gout);
            }
            if needs[b] {
                acc(&mut grads[b], gout.rows(), gout.cols()).add_assign(gout);
            }
        }
        Op::Sub { a, b } => {
            if needs[a] {
                acc(&mut grads[a], gout.rows(), gout.cols()).add_assign(gout);
            }
            if needs[b] {
                acc(&mut grads[b], gout.rows(), gout.cols()).axpy(-1.0, gout);
            }
        }
        Op::Hadamard { a, b } => {
            if needs[a] {
                let d = gout.hadamard(&values[b]);
                acc(&mut grads[a], d.rows(), d.cols()).add_assign(&d);
            }
            if needs[b] {
                let d = gout.hadamard(&values[a]);
                acc(&mut grads[b], d.rows(), d.cols()).add_assign(&d);
            }
        }
        Op::MatMul { a, b } => {
            if needs[a] {
                let d = gout.matmul_transb(&values[b]);
                acc(&mut grads[a], d.rows(), d.cols()).add_assign(&d);
            }
            if needs[b] {
                let d = values[a].matmul_transa(gout);
                acc(&mut grads[b], d.rows(), d.cols()).add_assign(&d);
            }
        }
        Op::MatMulTransB { a, b } => {
            // out = a b^T; d_a = gout b; d_b = gout^T a
            if needs[a] {
                let d = gout.matmul(&values[b]);
                acc(&mut grads[a], d.rows(), d.cols()).add_assign(&d);
            }
            if needs[b] {
                let d = gout.matmul_transa(&values[a]);
                acc(&mut grads[b], d.rows(), d.cols()).add_assign(&d);
            }
        }
        Op::Scale { x, c } => {
            if needs[x] {
                acc(&mut grads[x], gout.rows(), gout.cols()).axpy(c, gout);
            }
        }
        Op::ScaleByScalar { x, s } => {
            if needs[x] {
                let sv = values[s].item();
                acc(&mut grads[x], gout.rows(), gout.cols()).axpy(sv, gout);
            }
            if needs[s] {
                let d = gout.hadamard(&values[x]).sum();
                acc(&mut grads[s], 1, 1).as_mut_slice()[0] += d;
            }
        }
        Op::AddRowBroadcast { x, row } => {
            if needs[x] {
                acc(&mut grads[x], gout.rows(), gout.cols()).add_assign(gout);
            }
            if needs[row] {
                let g = acc(&mut grads[row], 1, gout.cols());
                for t in 0..gout.rows() {
                    for (o, a) in g.row_mut(0).iter_mut().zip(gout.row(t)) {
                        *o += a;
                    }
                }
            }
        }
        Op::AddScalarBroadcast { x, s } => {
            if needs[x] {
                acc(&mut grads[x], gout.rows(), gout.cols()).add_assign(gout);
            }
            if needs[s] {
                acc(&mut grads[s], 1, 1).as_mut_slice()[0] += gout.sum();
            }
        }
        Op::MulColBroadcast { x, col } => {
            if needs[x] {
                let xm = &values[x];
                let g = acc(&mut grads[x], xm.rows(), xm.cols());
                for t in 0..xm.rows() {
                    let cv = values[col][(t, 0)];
                    for (o, a) in g.row_mut(t).iter_mut().zip(gout.row(t)) {
                        *o += cv * a;
                    }
                }
            }
            if needs[col] {
                let xm = &values[x];
                let g = acc(&mut grads[col], xm.rows(), 1);
                for t in 0..xm.rows() {
                    let d: f64 = gout.row(t).iter().zip(xm.row(t)).map(|(a, b)| a * b).sum();
                    g.as_mut_slice()[t] += d;
                }
            }
        }
        Op::AddConst { x } => {
            if needs[x] {
                acc(&mut grads[x], gout.rows(), gout.cols()).add_assign(gout);
            }
        }
        Op::SoftmaxRows { x } => {
            if needs[x] {
                // y is this node's forward value: locate it as gout's sibling
                // via recomputation from the input (cheap at these sizes).
                let y = softmax_rows_kernel(&values[x]);
                let g = acc(&mut grads[x], y.rows(), y.cols());
                for t in 0..y.rows() {
                    let dot: f64 = gout.row(t).iter().zip(y.row(t)).map(|(a, b)| a * b).sum();
                    for c in 0..y.cols() {
                        g[(t, c)] += y[(t, c)] * (gout[(t, c)] - dot);
                    }
                }
            }
        }
        Op::LayerNormRows { x, gain, bias, eps } => {
            let xm = &values[x];
            let gm = &values[gain];
            let cols = xm.cols() as f64;
            for t in 0..xm.rows() {
                let row = xm.row(t);
                let mu = row.iter().sum::<f64>() / cols;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols;
                let sd = (var + eps).sqrt();
                let xhat: Vec<f64> = row.iter().map(|v| (v - mu) / sd).collect();
                let dxhat: Vec<f64> = gout
                    .row(t)
                    .iter()
                    .zip(gm.row(0))
                    .map(|(go, g)| go * g)
                    .collect();
                if needs[x] {
                    let m1 = dxhat.iter().sum::<f64>() / cols;
                    let m2 = dxhat.iter().zip(&xhat).map(|(d, h)| d * h).sum::<f64>() / cols;
                    let g = acc(&mut grads[x], xm.rows(), xm.cols());
                    for c in 0..row.len() {
                        g[(t, c)] += (dxhat[c] - m1 - xhat[c] * m2) / sd;
                    }
                }
                if needs[gain] {
                    let g = acc(&mut grads[gain], 1, xm.cols());
                    for c in 0..row.len() {
                        g[(0, c)] += gout[(t, c)] * xhat[c];
                    }
                }
                if needs[bias] {
                    let g = acc(&mut grads[bias], 1, xm.cols());
                    for c in 0..row.len() {
                        g[(0, c)] += gout[(t, c)];
                    }
                }
            }
        }
        Op::Tanh { x } => {
            if needs[x] {
                let y = values[x].map(f64::tanh);
                let g = acc(&mut grads[x], y.rows(), y.cols());
                for i in 0..y.as_slice().len() {
                    let yv = y.as_slice()[i];
                    g.as_mut_slice()[i] += gout.as_slice()[i] * (1.0 - yv * yv);
                }
            }
        }
        Op::Sigmoid { x } => {
            if needs[x] {
                let y = values[x].map(sigmoid);
                let g = acc(&mut grads[x], y.rows(), y.cols());
                for i in 0..y.as_slice().len() {
                    let yv = y.as_slice()[i];
                    g.as_mut_slice()[i] += gout.as_slice()[i] * yv * (1.0 - yv);
                }
            }
        }
        Op::RowEntropyNorm { x } => {
            if needs[x] {
                let pm = &values[x];
                if pm.cols() >= 2 {
                    let ln_t = (pm.cols() as f64).ln();
                    let g = acc(&mut grads[x], pm.rows(), pm.cols());
                    for t in 0..pm.rows() {
                        let go = gout[(t, 0)];
                        for c in 0..pm.cols() {
                            let p = pm[(t, c)];
                            if p > 0.0 {
                                g[(t, c)] += go * (-(p.ln() + 1.0) / ln_t);
                            }
                        }
                    }
                }
            }
        }
        Op::RowSum { x } => {
            if needs[x] {
                let xm = &values[x];
                let g = acc(&mut grads[x], xm.rows(), xm.cols());
                for t in 0..xm.rows() {
                    let go = gout[(t, 0)];
                    for c in 0..xm.cols() {
                        g[(t, c)] += go;
                    }
                }
            }
        }
        Op::MeanRows { x } => {
            if needs[x] {
                let xm = &values[x];
                let inv = 1.0 / xm.rows() as f64;
                let g = acc(&mut grads[x], xm.rows(), xm.cols());
                for t in 0..xm.rows() {
                    for c in 0..xm.cols() {
                        g[(t, c)] += gout[(0, c)] * inv;
                    }
                }
            }
        }
        Op::SumAll { x } => {
            if needs[x] {
                let xm = &values[x];
                let go = gout.item();
                let g = acc(&mut grads[x], xm.rows(), xm.cols());
                for v in g.as_mut_slice() {
                    *v += go;
                }
            }
        }
        Op::GatherRows { table, ref idx } => {
            if needs[table] {
                let tm = &values[table];
                let g = acc(&mut grads[table], tm.rows(), tm.cols());
                for (t, &i) in idx.iter().enumerate() {
                    for c in 0..tm.cols() {
                        g[(i, c)] += gout[(t, c)];
                    }
                }
            }
        }
        Op::SliceCols { x, start } => {
            if needs[x] {
                let xm = &values[x];
                let g = acc(&mut grads[x], xm.rows(), xm.cols());
                for t in 0..gout.rows() {
                    for c in 0..gout.cols() {
                        g[(t, start + c)] += gout[(t, c)];
                    }
                }
            }
        }
        Op::SliceRows { x, start } => {
            if needs[x] {
                let xm = &values[x];
                let g = acc(&mut grads[x], xm.rows(), xm.cols());
                for t in 0..gout.rows() {
                    for c in 0..gout.cols() {
                        g[(start + t, c)] += gout[(t, c)];
                    }
                }
            }
        }
        Op::ConcatCols { ref parts } => {
            let mut off = 0;
            for &p in parts {
                let pc = values[p].cols();
                if needs[p] {
                    let pr = values[p].rows();
                    let g = acc(&mut grads[p], pr, pc);
                    for t in 0..pr {
                        for c in 0..pc {
                            g[(t, c)] += gout[(t, off + c)];
                        }
                    }
                }
                off += pc;
            }
        }
        Op::ConcatRows { ref parts } => {
            let mut off = 0;
            for &p in parts {
                let pr = values[p].rows();
                if needs[p] {
                    let pc = values[p].cols();
                    let g = acc(&mut grads[p], pr, pc);
                    for t in 0..pr {
                        for c in 0..pc {
                            g[(t, c)] += gout[(off + t, c)];
                        }
                    }
                }
                off += pr;
            }
        }
        Op::ResampleRows { x } => {
            if needs[x] {
                let xm = &values[x];
                let g = acc(&mut grads[x], xm.rows(), xm.cols());
                for (i, (lo, hi, w)) in resample_weights(xm.rows(), gout.rows()).into_iter().enumerate() {
                    for c in 0..xm.cols() {
                        g[(lo, c)] += (1.0 - w) * gout[(i, c)];
                        g[(hi, c)] += w * gout[(i, c)];
                    }
                }
            }
        }
        Op::CrossEntropyMeanRows { logits, ref targets, ref probs } => {
            if needs[logits] {
                let go = gout.item() / targets.len() as f64;
                let g = acc(&mut grads[logits], probs.rows(), probs.cols());
                for (t, &tgt) in targets.iter().enumerate() {
                    for c in 0..probs.cols() {
                        let ind = if c == tgt { 1.0 } else { 0.0 };
                        g[(t, c)] += go * (probs[(t, c)] - ind);
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row softmax stabilized by max subtraction.
pub(crate) fn softmax_rows_kernel(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for t in 0..m.rows() {
        let row = m.row(t);
        let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &z) in out.row_mut(t).iter_mut().zip(row) {
            *o = (z - maxv).exp();
            sum += *o;
        }
        for o in out.row_mut(t) {
            *o /= sum;
        }
    }
    out
}

/// Row log-softmax, for scoring without round-tripping through exp.
pub(crate) fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let logsum = row.iter().map(|&z| (z - maxv).exp()).sum::<f64>().ln() + maxv;
    row.iter().map(|&z| z - logsum).collect()
}

pub(crate) fn layer_norm_kernel(x: &Matrix, gain: &Matrix, bias: &Matrix, eps: f64) -> Matrix {
    let cols = x.cols() as f64;
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for t in 0..x.rows() {
        let row = x.row(t);
        let mu = row.iter().sum::<f64>() / cols;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols;
        let sd = (var + eps).sqrt();
        for c in 0..row.len() {
            out[(t, c)] = (row[c] - mu) / sd * gain[(0, c)] + bias[(0, c)];
        }
    }
    out
}

pub(crate) fn row_entropy_kernel(p: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(p.rows(), 1);
    if p.cols() < 2 {
        return out; // single support point: concentration is total, S = 0
    }
    let ln_t = (p.cols() as f64).ln();
    for t in 0..p.rows() {
        let mut h = 0.0;
        for &v in p.row(t) {
            if v > 0.0 {
                h -= v * v.ln();
            }
        }
        out[(t, 0)] = if h == 0.0 { 0.0 } else { h / ln_t };
    }
    out
}

/// Interpolation stencil for endpoint-aligned linear resampling.
pub(crate) fn resample_weights(t_in: usize, t_out: usize) -> Vec<(usize, usize, f64)> {
    assert!(t_in >= 1 && t_out >= 1);
    let mut out = Vec::with_capacity(t_out);
    for i in 0..t_out {
        let pos = if t_out == 1 || t_in == 1 {
            0.0
        } else {
            (i as f64) * ((t_in - 1) as f64) / ((t_out - 1) as f64)
        };
        let lo = (pos.floor() as usize).min(t_in - 1);
        let hi = (lo + 1).min(t_in - 1);
        let w = pos - lo as f64;
        out.push((lo, hi, w));
    }
    out
}
