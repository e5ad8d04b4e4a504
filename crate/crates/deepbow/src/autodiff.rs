//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records an eager computation graph over [`Matrix`] values.
//! Operations that consume trainable tensors ([`Tape::embed`],
//! [`Tape::linear`]) read them straight out of the flat [`ParamStore`] and
//! route their gradients into a [`GradBuffer`] with the same layout, so a
//! backward pass never materializes parameter-shaped temporaries beyond the
//! gradient buffer itself.
//!
//! The op set is exactly what the model needs — transformer plumbing plus
//! the sparse scoring and loss heads — each with a hand-derived backward
//! rule verified against central finite differences in this module's tests.

use crate::math::{self, Matrix};
use crate::params::{GradBuffer, ParamStore, TensorId};

const LAYER_NORM_EPS: f64 = 1e-5;
/// Probability clamp for the cross-entropy loss.
pub const BCE_CLAMP: f64 = 1e-7;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Const,
    /// Row gather from an embedding table.
    Embed { table: TensorId, tokens: Vec<u32> },
    /// x·W (+ b) with W, b in the parameter store.
    Linear {
        x: NodeId,
        w: TensorId,
        b: Option<TensorId>,
        in_dim: usize,
        out_dim: usize,
    },
    /// x·W[:,cols] (+ b[cols]): a linear layer restricted to a column
    /// subset, for outputs only ever read at those columns.
    LinearCols {
        x: NodeId,
        w: TensorId,
        b: Option<TensorId>,
        in_dim: usize,
        out_dim: usize,
        cols: Vec<u32>,
    },
    Add { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    MatMul { a: NodeId, b: NodeId },
    /// a·bᵀ.
    MatMulNT { a: NodeId, b: NodeId },
    SliceCols { a: NodeId, start: usize, len: usize },
    ConcatCols { parts: Vec<NodeId> },
    MeanRows { a: NodeId },
    SoftmaxRows { a: NodeId },
    LayerNormRows { a: NodeId },
    Gelu { a: NodeId },
    Sigmoid { a: NodeId },
    /// Gated mixture over the vocabulary axis: `g·vc + (1−g)·vw[j]` at
    /// member position `members[j]`, `vc` elsewhere. `vw` carries one
    /// entry per member.
    GateMix {
        vc: NodeId,
        vw: NodeId,
        gate: NodeId,
        members: Vec<u32>,
    },
    /// Σᵢ coeffs[i]·g[indices[i]] with fixed coefficients.
    SparseDot {
        g: NodeId,
        indices: Vec<u32>,
        coeffs: Vec<f64>,
    },
    /// Σᵢ p[i]·g[tokens[i]] with differentiable p.
    GatherDot {
        p: NodeId,
        g: NodeId,
        tokens: Vec<u32>,
    },
    /// Full dot product of two row vectors.
    DotFull { a: NodeId, b: NodeId },
    SumAll { a: NodeId },
    DivScalar { num: NodeId, den: NodeId },
    L2Norm { a: NodeId },
    /// Binary cross-entropy of a probability against a fixed label, with
    /// inputs clamped to [BCE_CLAMP, 1−BCE_CLAMP].
    Bce { p: NodeId, label: f64 },
}

struct Node {
    op: Op,
    value: Matrix,
}

/// Eager computation tape over a borrowed parameter store.
pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::with_capacity(128),
        }
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id.0].value;
        debug_assert_eq!((v.rows, v.cols), (1, 1), "scalar() on non-scalar node");
        v.data[0]
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Const, value)
    }

    pub fn embed(&mut self, table: TensorId, tokens: &[u32]) -> NodeId {
        let meta = self.store.meta(table);
        let d = meta.cols;
        let rows = meta.rows;
        let data = self.store.slice(table);
        let mut value = Matrix::zeros(tokens.len(), d);
        for (i, &t) in tokens.iter().enumerate() {
            let t = t as usize;
            assert!(t < rows, "token index {t} out of embedding range {rows}");
            value.row_mut(i).copy_from_slice(&data[t * d..(t + 1) * d]);
        }
        self.push(
            Op::Embed {
                table,
                tokens: tokens.to_vec(),
            },
            value,
        )
    }

    pub fn linear(&mut self, x: NodeId, w: TensorId, b: Option<TensorId>) -> NodeId {
        let meta = self.store.meta(w);
        let (in_dim, out_dim) = (meta.rows, meta.cols);
        if let Some(b) = b {
            let bm = self.store.meta(b);
            assert_eq!((bm.rows, bm.cols), (1, out_dim), "bias shape");
        }
        let value = math::linear_forward(
            self.value(x),
            self.store.slice(w),
            in_dim,
            out_dim,
            b.map(|b| self.store.slice(b)),
        );
        self.push(
            Op::Linear {
                x,
                w,
                b,
                in_dim,
                out_dim,
            },
            value,
        )
    }

    /// Like [`Tape::linear`] for a single row, but only the columns in
    /// `cols` are computed; the value is `1×cols.len()` in that order.
    pub fn linear_cols(
        &mut self,
        x: NodeId,
        w: TensorId,
        b: Option<TensorId>,
        cols: &[u32],
    ) -> NodeId {
        let meta = self.store.meta(w);
        let (in_dim, out_dim) = (meta.rows, meta.cols);
        let vx = self.value(x);
        assert_eq!(vx.rows, 1, "linear_cols expects a row vector");
        assert_eq!(vx.cols, in_dim, "linear_cols input width");
        let ws = self.store.slice(w);
        let bs = b.map(|b| {
            let bm = self.store.meta(b);
            assert_eq!((bm.rows, bm.cols), (1, out_dim), "bias shape");
            self.store.slice(b)
        });
        let mut value = Matrix::zeros(1, cols.len());
        for (j, &c) in cols.iter().enumerate() {
            let c = c as usize;
            assert!(c < out_dim, "column outside weight matrix");
            let mut z = bs.map_or(0.0, |bs| bs[c]);
            for (i, &xi) in vx.data.iter().enumerate() {
                z += xi * ws[i * out_dim + c];
            }
            value.data[j] = z;
        }
        self.push(
            Op::LinearCols {
                x,
                w,
                b,
                in_dim,
                out_dim,
                cols: cols.to_vec(),
            },
            value,
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols), "add shape");
        let mut value = va.clone();
        for (o, &x) in value.data.iter_mut().zip(&vb.data) {
            *o += x;
        }
        self.push(Op::Add { a, b }, value)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let mut value = self.value(a).clone();
        for v in &mut value.data {
            *v *= c;
        }
        self.push(Op::Scale { a, c }, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = math::matmul(self.value(a), self.value(b));
        self.push(Op::MatMul { a, b }, value)
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        let mut value = Matrix::zeros(va.rows, vb.rows);
        math::matmul_nt_acc(va, vb, &mut value);
        self.push(Op::MatMulNT { a, b }, value)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let va = self.value(a);
        assert!(start + len <= va.cols, "column slice out of range");
        let mut value = Matrix::zeros(va.rows, len);
        for i in 0..va.rows {
            value
                .row_mut(i)
                .copy_from_slice(&va.row(i)[start..start + len]);
        }
        self.push(Op::SliceCols { a, start, len }, value)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut value = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut at = 0;
            for &p in parts {
                let vp = self.value(p);
                assert_eq!(vp.rows, rows, "concat row mismatch");
                value.row_mut(i)[at..at + vp.cols].copy_from_slice(vp.row(i));
                at += vp.cols;
            }
        }
        self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            value,
        )
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        assert!(va.rows > 0, "mean of empty matrix");
        let mut value = Matrix::zeros(1, va.cols);
        for i in 0..va.rows {
            for (j, &v) in va.row(i).iter().enumerate() {
                value.data[j] += v;
            }
        }
        let inv = 1.0 / va.rows as f64;
        for v in &mut value.data {
            *v *= inv;
        }
        self.push(Op::MeanRows { a }, value)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut value = self.value(a).clone();
        for i in 0..value.rows {
            math::softmax_in_place(value.row_mut(i));
        }
        self.push(Op::SoftmaxRows { a }, value)
    }

    pub fn layer_norm_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut value = Matrix::zeros(va.rows, va.cols);
        for i in 0..va.rows {
            let row = va.row(i);
            let (mean, var) = row_moments(row);
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (j, &x) in row.iter().enumerate() {
                value.row_mut(i)[j] = (x - mean) * inv;
            }
        }
        self.push(Op::LayerNormRows { a }, value)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let mut value = self.value(a).clone();
        for v in &mut value.data {
            *v = math::gelu(*v);
        }
        self.push(Op::Gelu { a }, value)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let mut value = self.value(a).clone();
        for v in &mut value.data {
            *v = math::sigmoid(*v);
        }
        self.push(Op::Sigmoid { a }, value)
    }

    /// `members` must be sorted, unique, and in range for the row vectors.
    pub fn gate_mix(&mut self, vc: NodeId, vw: NodeId, gate: NodeId, members: &[u32]) -> NodeId {
        let g = self.scalar(gate);
        let (vvc, vvw) = (self.value(vc), self.value(vw));
        assert_eq!(vvc.rows, 1, "gate_mix expects row vectors");
        assert_eq!(
            (vvw.rows, vvw.cols),
            (1, members.len()),
            "gate_mix member width"
        );
        let mut value = vvc.clone();
        for (j, &t) in members.iter().enumerate() {
            let t = t as usize;
            value.data[t] = g * vvc.data[t] + (1.0 - g) * vvw.data[j];
        }
        self.push(
            Op::GateMix {
                vc,
                vw,
                gate,
                members: members.to_vec(),
            },
            value,
        )
    }

    pub fn sparse_dot(&mut self, g: NodeId, indices: &[u32], coeffs: &[f64]) -> NodeId {
        assert_eq!(indices.len(), coeffs.len(), "sparse_dot length mismatch");
        let vg = self.value(g);
        assert_eq!(vg.rows, 1, "sparse_dot expects a row vector");
        let mut acc = 0.0;
        for (&t, &c) in indices.iter().zip(coeffs) {
            acc += c * vg.data[t as usize];
        }
        self.push(
            Op::SparseDot {
                g,
                indices: indices.to_vec(),
                coeffs: coeffs.to_vec(),
            },
            Matrix::from_vec(1, 1, vec![acc]),
        )
    }

    pub fn gather_dot(&mut self, p: NodeId, g: NodeId, tokens: &[u32]) -> NodeId {
        let (vp, vg) = (self.value(p), self.value(g));
        assert_eq!(vp.rows, 1, "gather_dot weights must be a row vector");
        assert_eq!(vp.cols, tokens.len(), "gather_dot arity");
        let mut acc = 0.0;
        for (i, &t) in tokens.iter().enumerate() {
            acc += vp.data[i] * vg.data[t as usize];
        }
        self.push(
            Op::GatherDot {
                p,
                g,
                tokens: tokens.to_vec(),
            },
            Matrix::from_vec(1, 1, vec![acc]),
        )
    }

    pub fn dot_full(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!((va.rows, vb.rows), (1, 1), "dot_full expects row vectors");
        let acc = math::dot(&va.data, &vb.data);
        self.push(Op::DotFull { a, b }, Matrix::from_vec(1, 1, vec![acc]))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let acc: f64 = self.value(a).data.iter().sum();
        self.push(Op::SumAll { a }, Matrix::from_vec(1, 1, vec![acc]))
    }

    pub fn div_scalar(&mut self, num: NodeId, den: NodeId) -> NodeId {
        let (n, d) = (self.scalar(num), self.scalar(den));
        assert!(d != 0.0, "division by zero scalar node");
        self.push(
            Op::DivScalar { num, den },
            Matrix::from_vec(1, 1, vec![n / d]),
        )
    }

    pub fn l2_norm(&mut self, a: NodeId) -> NodeId {
        let norm = self
            .value(a)
            .data
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        self.push(Op::L2Norm { a }, Matrix::from_vec(1, 1, vec![norm]))
    }

    pub fn bce(&mut self, p: NodeId, label: f64) -> NodeId {
        let raw = self.scalar(p);
        let clamped = raw.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        let loss = -(label * clamped.ln() + (1.0 - label) * (1.0 - clamped).ln());
        self.push(Op::Bce { p, label }, Matrix::from_vec(1, 1, vec![loss]))
    }

    /// Reverse pass from a scalar root, accumulating parameter gradients
    /// into `grads` (which is NOT cleared — callers sum over a batch).
    pub fn backward(&self, root: NodeId, grads: &mut GradBuffer) {
        let rv = &self.nodes[root.0].value;
        assert_eq!((rv.rows, rv.cols), (1, 1), "backward root must be scalar");
        let mut node_grads: Vec<Option<Matrix>> = Vec::with_capacity(root.0 + 1);
        node_grads.resize_with(root.0 + 1, || None);
        node_grads[root.0] = Some(Matrix::from_vec(1, 1, vec![1.0]));

        for i in (0..=root.0).rev() {
            let Some(go) = node_grads[i].take() else {
                continue;
            };
            match &self.nodes[i].op {
                Op::Const => {}
                Op::Embed { table, tokens } => {
                    let d = go.cols;
                    let slot = grads.slice_mut(self.store, *table);
                    for (r, &t) in tokens.iter().enumerate() {
                        let t = t as usize;
                        let dst = &mut slot[t * d..(t + 1) * d];
                        for (o, &v) in dst.iter_mut().zip(go.row(r)) {
                            *o += v;
                        }
                    }
                }
                Op::Linear {
                    x,
                    w,
                    b,
                    in_dim,
                    out_dim,
                } => {
                    let dx =
                        math::linear_backward_dx(&go, self.store.slice(*w), *in_dim, *out_dim);
                    accumulate(&mut node_grads, *x, dx);
                    math::linear_backward_dw(
                        &self.nodes[x.0].value,
                        &go,
                        grads.slice_mut(self.store, *w),
                    );
                    if let Some(b) = b {
                        math::column_sums_acc(&go, grads.slice_mut(self.store, *b));
                    }
                }
                Op::LinearCols {
                    x,
                    w,
                    b,
                    in_dim,
                    out_dim,
                    cols,
                } => {
                    let vx = &self.nodes[x.0].value;
                    let ws = self.store.slice(*w);
                    let mut dx = Matrix::zeros(1, *in_dim);
                    let dw = grads.slice_mut(self.store, *w);
                    for (j, &c) in cols.iter().enumerate() {
                        let c = c as usize;
                        let gj = go.data[j];
                        for i in 0..*in_dim {
                            dx.data[i] += gj * ws[i * *out_dim + c];
                            dw[i * *out_dim + c] += gj * vx.data[i];
                        }
                    }
                    accumulate(&mut node_grads, *x, dx);
                    if let Some(b) = b {
                        let db = grads.slice_mut(self.store, *b);
                        for (j, &c) in cols.iter().enumerate() {
                            db[c as usize] += go.data[j];
                        }
                    }
                }
                Op::Add { a, b } => {
                    accumulate(&mut node_grads, *a, go.clone());
                    accumulate(&mut node_grads, *b, go);
                }
                Op::Scale { a, c } => {
                    let mut da = go;
                    for v in &mut da.data {
                        *v *= c;
                    }
                    accumulate(&mut node_grads, *a, da);
                }
                Op::MatMul { a, b } => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let mut da = Matrix::zeros(va.rows, va.cols);
                    math::matmul_nt_acc(&go, vb, &mut da);
                    accumulate(&mut node_grads, *a, da);
                    accumulate(&mut node_grads, *b, math::matmul_tn(va, &go));
                }
                Op::MatMulNT { a, b } => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    accumulate(&mut node_grads, *a, math::matmul(&go, vb));
                    accumulate(&mut node_grads, *b, math::matmul_tn(&go, va));
                }
                Op::SliceCols { a, start, len } => {
                    let va = &self.nodes[a.0].value;
                    let mut da = Matrix::zeros(va.rows, va.cols);
                    for r in 0..va.rows {
                        da.row_mut(r)[*start..*start + *len].copy_from_slice(go.row(r));
                    }
                    accumulate(&mut node_grads, *a, da);
                }
                Op::ConcatCols { parts } => {
                    let mut at = 0;
                    for &p in parts {
                        let vp = &self.nodes[p.0].value;
                        let mut dp = Matrix::zeros(vp.rows, vp.cols);
                        for r in 0..vp.rows {
                            dp.row_mut(r).copy_from_slice(&go.row(r)[at..at + vp.cols]);
                        }
                        at += vp.cols;
                        accumulate(&mut node_grads, p, dp);
                    }
                }
                Op::MeanRows { a } => {
                    let va = &self.nodes[a.0].value;
                    let inv = 1.0 / va.rows as f64;
                    let mut da = Matrix::zeros(va.rows, va.cols);
                    for r in 0..va.rows {
                        for (j, v) in da.row_mut(r).iter_mut().enumerate() {
                            *v = go.data[j] * inv;
                        }
                    }
                    accumulate(&mut node_grads, *a, da);
                }
                Op::SoftmaxRows { a } => {
                    let y = &self.nodes[i].value;
                    let mut da = Matrix::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = go.row(r);
                        let dot = math::dot(gr, yr);
                        for j in 0..y.cols {
                            da.row_mut(r)[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut node_grads, *a, da);
                }
                Op::LayerNormRows { a } => {
                    let x = &self.nodes[a.0].value;
                    let y = &self.nodes[i].value;
                    let mut da = Matrix::zeros(x.rows, x.cols);
                    let m = x.cols as f64;
                    for r in 0..x.rows {
                        let (mean, var) = row_moments(x.row(r));
                        let _ = mean;
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let gr = go.row(r);
                        let yr = y.row(r);
                        let g_mean: f64 = gr.iter().sum::<f64>() / m;
                        let gy_mean: f64 = math::dot(gr, yr) / m;
                        for j in 0..x.cols {
                            da.row_mut(r)[j] = inv * (gr[j] - g_mean - yr[j] * gy_mean);
                        }
                    }
                    accumulate(&mut node_grads, *a, da);
                }
                Op::Gelu { a } => {
                    let x = &self.nodes[a.0].value;
                    let mut da = go;
                    for (v, &xv) in da.data.iter_mut().zip(&x.data) {
                        *v *= math::gelu_grad(xv);
                    }
                    accumulate(&mut node_grads, *a, da);
                }
                Op::Sigmoid { a } => {
                    let y = &self.nodes[i].value;
                    let mut da = go;
                    for (v, &yv) in da.data.iter_mut().zip(&y.data) {
                        *v *= yv * (1.0 - yv);
                    }
                    accumulate(&mut node_grads, *a, da);
                }
                Op::GateMix {
                    vc,
                    vw,
                    gate,
                    members,
                } => {
                    let g = self.nodes[gate.0].value.data[0];
                    let (vvc, vvw) = (&self.nodes[vc.0].value, &self.nodes[vw.0].value);
                    let mut dvc = go.clone();
                    let mut dvw = Matrix::zeros(1, vvw.cols);
                    let mut dg = 0.0;
                    for (j, &t) in members.iter().enumerate() {
                        let t = t as usize;
                        dvc.data[t] = go.data[t] * g;
                        dvw.data[j] = go.data[t] * (1.0 - g);
                        dg += go.data[t] * (vvc.data[t] - vvw.data[j]);
                    }
                    accumulate(&mut node_grads, *vc, dvc);
                    accumulate(&mut node_grads, *vw, dvw);
                    accumulate(&mut node_grads, *gate, Matrix::from_vec(1, 1, vec![dg]));
                }
                Op::SparseDot { g, indices, coeffs } => {
                    let s = go.data[0];
                    let vg = &self.nodes[g.0].value;
                    let mut dg = Matrix::zeros(1, vg.cols);
                    for (&t, &c) in indices.iter().zip(coeffs) {
                        dg.data[t as usize] += s * c;
                    }
                    accumulate(&mut node_grads, *g, dg);
                }
                Op::GatherDot { p, g, tokens } => {
                    let s = go.data[0];
                    let vp = &self.nodes[p.0].value;
                    let vg = &self.nodes[g.0].value;
                    let mut dp = Matrix::zeros(1, vp.cols);
                    let mut dg = Matrix::zeros(1, vg.cols);
                    for (idx, &t) in tokens.iter().enumerate() {
                        let t = t as usize;
                        dp.data[idx] = s * vg.data[t];
                        dg.data[t] += s * vp.data[idx];
                    }
                    accumulate(&mut node_grads, *p, dp);
                    accumulate(&mut node_grads, *g, dg);
                }
                Op::DotFull { a, b } => {
                    let s = go.data[0];
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let mut da = vb.clone();
                    for v in &mut da.data {
                        *v *= s;
                    }
                    let mut db = va.clone();
                    for v in &mut db.data {
                        *v *= s;
                    }
                    accumulate(&mut node_grads, *a, da);
                    accumulate(&mut node_grads, *b, db);
                }
                Op::SumAll { a } => {
                    let s = go.data[0];
                    let va = &self.nodes[a.0].value;
                    let mut da = Matrix::zeros(va.rows, va.cols);
                    da.data.fill(s);
                    accumulate(&mut node_grads, *a, da);
                }
                Op::DivScalar { num, den } => {
                    let s = go.data[0];
                    let (n, d) = (self.nodes[num.0].value.data[0], self.nodes[den.0].value.data[0]);
                    accumulate(&mut node_grads, *num, Matrix::from_vec(1, 1, vec![s / d]));
                    accumulate(
                        &mut node_grads,
                        *den,
                        Matrix::from_vec(1, 1, vec![-s * n / (d * d)]),
                    );
                }
                Op::L2Norm { a } => {
                    let s = go.data[0];
                    let norm = self.nodes[i].value.data[0];
                    let va = &self.nodes[a.0].value;
                    let mut da = Matrix::zeros(va.rows, va.cols);
                    if norm > 0.0 {
                        for (v, &x) in da.data.iter_mut().zip(&va.data) {
                            *v = s * x / norm;
                        }
                    }
                    accumulate(&mut node_grads, *a, da);
                }
                Op::Bce { p, label } => {
                    let s = go.data[0];
                    let raw = self.nodes[p.0].value.data[0];
                    // Inside the clamp the usual derivative applies; outside,
                    // the clamp flattens the loss and the gradient is zero.
                    let d = if raw > BCE_CLAMP && raw < 1.0 - BCE_CLAMP {
                        (raw - label) / (raw * (1.0 - raw))
                    } else {
                        0.0
                    };
                    accumulate(&mut node_grads, *p, Matrix::from_vec(1, 1, vec![s * d]));
                }
            }
        }
    }
}

fn accumulate(node_grads: &mut [Option<Matrix>], id: NodeId, contribution: Matrix) {
    match &mut node_grads[id.0] {
        Some(existing) => {
            debug_assert_eq!(
                (existing.rows, existing.cols),
                (contribution.rows, contribution.cols),
                "gradient shape mismatch"
            );
            for (o, &v) in existing.data.iter_mut().zip(&contribution.data) {
                *o += v;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

fn row_moments(row: &[f64]) -> (f64, f64) {
    let m = row.len() as f64;
    let mean = row.iter().sum::<f64>() / m;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / m;
    (mean, var)
}

/// Result of comparing analytic gradients against central finite
/// differences.
#[derive(Debug, Clone)]
pub struct FdReport {
    /// Worst `|analytic − fd| / max(|analytic|, |fd|, 1e-3)` over all
    /// checked entries. The 1e-3 floor makes the 1e-4 relative bound an
    /// absolute bound of 1e-7 for near-zero gradients.
    pub max_rel_err: f64,
    /// Tensor name and flat offset-within-store of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

impl FdReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Checks `analytic` against central finite differences of `loss` at the
/// given flat parameter indices, using `step` perturbations. `loss` must be
/// a pure function of the store contents.
pub fn fd_compare(
    store: &mut ParamStore,
    analytic: &GradBuffer,
    indices: &[usize],
    step: f64,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> FdReport {
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    for &i in indices {
        let original = store.values()[i];
        store.values_mut()[i] = original + step;
        let up = loss(store);
        store.values_mut()[i] = original - step;
        let down = loss(store);
        store.values_mut()[i] = original;
        let fd = (up - down) / (2.0 * step);
        let a = analytic.data()[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
        report.checked += 1;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            let name = store
                .metas()
                .iter()
                .find(|m| i >= m.offset && i < m.offset + m.len())
                .map(|m| (m.name.clone(), i - m.offset));
            report.worst = name;
        }
    }
    report
}
