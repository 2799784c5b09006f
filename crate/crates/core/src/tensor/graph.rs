//! Dynamic tape for reverse-mode differentiation.
//!
//! A [`Graph`] records one forward computation. Each operation validates
//! shapes, computes its value eagerly, and appends a node; [`Graph::backward`]
//! replays the tape in reverse and scatters parameter gradients back into the
//! [`ParameterStore`] the parameters were bound from. Tapes are single-use:
//! one per training step or one per inference call.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::store::{ParamId, ParameterStore};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
#[allow(dead_code)] // payload fields exist for Debug output
enum Op {
    Leaf,
    Param(ParamId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    /// `[m,n] + [n]`, the row-broadcast bias add.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId, f64),
    Relu(NodeId),
    Exp(NodeId),
    Abs(NodeId),
    Clamp(NodeId, f64, f64),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    Transpose(NodeId),
    ConcatRows(Vec<NodeId>),
    SliceRows {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    /// Flat index map; `-1` reads as zero. Backward is scatter-add.
    Gather {
        x: NodeId,
        idx: Rc<Vec<i64>>,
    },
    SumAll(NodeId),
    MeanAll(NodeId),
    Reshape(NodeId),
}

struct Node<F> {
    op: Op,
    value: Tensor<F>,
}

/// Recorded forward computation.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Tensor<F>>>,
    bound: Vec<(ParamId, NodeId)>,
    memo: HashMap<usize, NodeId>,
    grad_fault: bool,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            bound: Vec::new(),
            memo: HashMap::new(),
            grad_fault: false,
        }
    }

    /// Test fixture: perturb the first matmul backward rule so a gradient
    /// check must fail. Never set outside fault-injection tests.
    pub fn set_grad_fault(&mut self, on: bool) {
        self.grad_fault = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` target w.r.t. node `id`, if reached.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, op: Op, value: Tensor<F>) -> NodeId {
        debug_assert!(value.is_finite(), "non-finite forward value from {op:?}");
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<F>) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Bind a stored parameter onto the tape. Repeated binds of the same
    /// parameter return the same node, so shared weights accumulate
    /// gradients from every use site.
    pub fn param(&mut self, store: &ParameterStore<F>, id: ParamId) -> NodeId {
        if let Some(&n) = self.memo.get(&id.index()) {
            return n;
        }
        let value = store.value(id).clone();
        let n = self.push(Op::Param(id), value);
        self.memo.insert(id.index(), n);
        self.bound.push((id, n));
        n
    }

    fn binary_same_shape(&mut self, a: NodeId, b: NodeId, name: &str) -> Result<(Vec<usize>, ())> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(format!("{name}: {sa:?} vs {sb:?}")));
        }
        Ok((sa.to_vec(), ()))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add(a, b), data))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "sub")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), data))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), data))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul: {sa:?} x {sb:?}")));
        }
        let value = matmul_nn(self.value(a), self.value(b));
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (sx, sr) = (self.value(x).shape(), self.value(row).shape());
        if sr.len() != 1 || *sx.last().unwrap() != sr[0] {
            return Err(Error::dim(format!("add_row: {sx:?} + {sr:?}")));
        }
        let n = sr[0];
        let mut out = self.value(x).clone();
        let rowv = self.value(row).data().to_vec();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, &r) in chunk.iter_mut().zip(&rowv) {
                *o += r;
            }
        }
        Ok(self.push(Op::AddRow(x, row), out))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let k = F::from_f64(c);
        let out = map(self.value(x), |v| v * k);
        self.push(Op::Scale(x, c), out)
    }

    pub fn add_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let k = F::from_f64(c);
        let out = map(self.value(x), |v| v + k);
        self.push(Op::AddConst(x, c), out)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = map(self.value(x), |v| if v > F::zero() { v } else { F::zero() });
        self.push(Op::Relu(x), out)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let out = map(self.value(x), |v| v.exp());
        self.push(Op::Exp(x), out)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let out = map(self.value(x), |v| v.abs());
        self.push(Op::Abs(x), out)
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let (l, h) = (F::from_f64(lo), F::from_f64(hi));
        let out = map(self.value(x), |v| v.max(l).min(h));
        self.push(Op::Clamp(x, lo, hi), out)
    }

    /// Row-stabilized softmax along the last axis of a rank-2 tensor.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.value(x).shape();
        if sx.len() != 2 {
            return Err(Error::dim(format!("softmax_rows: rank-2 required, got {sx:?}")));
        }
        let n = sx[1];
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Ok(self.push(Op::SoftmaxRows(x), out))
    }

    /// Per-row normalization over the last axis followed by the affine map
    /// `gain * x_hat + bias`. Variance is the biased estimate; `eps` sits
    /// inside the square root, which also defines the zero-variance case.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        if eps <= 0.0 {
            return Err(Error::dim(format!("layer_norm: eps must be > 0, got {eps}")));
        }
        let d = self.value(x).n_cols();
        let (sg, sb) = (self.value(gain).shape(), self.value(bias).shape());
        if sg != [d] || sb != [d] {
            return Err(Error::dim(format!(
                "layer_norm: gain {sg:?} / bias {sb:?} vs last extent {d}"
            )));
        }
        let e = F::from_f64(eps);
        let inv_d = F::from_f64(1.0 / d as f64);
        let mut out = self.value(x).clone();
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        for row in out.data_mut().chunks_mut(d) {
            let mean = row.iter().fold(F::zero(), |s, &v| s + v) * inv_d;
            let var = row
                .iter()
                .fold(F::zero(), |s, &v| s + (v - mean) * (v - mean))
                * inv_d;
            let inv_sigma = (var + e).sqrt().recip();
            for (j, v) in row.iter_mut().enumerate() {
                *v = g[j] * ((*v - mean) * inv_sigma) + b[j];
            }
        }
        Ok(self.push(Op::LayerNorm { x, gain, bias, eps }, out))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.value(x).shape();
        if sx.len() != 2 {
            return Err(Error::dim(format!("transpose: rank-2 required, got {sx:?}")));
        }
        let (m, n) = (sx[0], sx[1]);
        let src = self.value(x).data();
        let mut data = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let out = Tensor::from_vec(&[n, m], data)?;
        Ok(self.push(Op::Transpose(x), out))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::usage("concat_rows: empty input list"));
        }
        let n = self.value(parts[0]).n_cols();
        let mut rows = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 2 || s[1] != n {
                return Err(Error::dim(format!("concat_rows: widths differ ({s:?} vs {n})")));
            }
            rows += s[0];
        }
        let mut data = Vec::with_capacity(rows * n);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::from_vec(&[rows, n], data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), out))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.value(x).shape();
        if s.len() != 2 || start + len > s[0] || len == 0 {
            return Err(Error::dim(format!(
                "slice_rows: [{start}, {start}+{len}) out of {s:?}"
            )));
        }
        let n = s[1];
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::from_vec(&[len, n], data)?;
        Ok(self.push(Op::SliceRows { x, start }, out))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::usage("concat_cols: empty input list"));
        }
        let m = self.value(parts[0]).shape()[0];
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 2 || s[0] != m {
                return Err(Error::dim(format!("concat_cols: row counts differ ({s:?} vs {m})")));
            }
            total += s[1];
        }
        let mut data = vec![F::zero(); m * total];
        let mut col = 0;
        for &p in parts {
            let v = self.value(p);
            let w = v.shape()[1];
            for i in 0..m {
                data[i * total + col..i * total + col + w].copy_from_slice(v.row(i));
            }
            col += w;
        }
        let out = Tensor::from_vec(&[m, total], data)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.value(x).shape();
        if s.len() != 2 || start + len > s[1] || len == 0 {
            return Err(Error::dim(format!(
                "slice_cols: [{start}, {start}+{len}) out of {s:?}"
            )));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let out = Tensor::from_vec(&[m, len], data)?;
        Ok(self.push(Op::SliceCols { x, start }, out))
    }

    /// Rearrangement by flat index map: `out[i] = idx[i] < 0 ? 0 : x[idx[i]]`.
    /// Used for im2col-style patch extraction.
    pub fn gather(&mut self, x: NodeId, idx: Rc<Vec<i64>>, out_shape: &[usize]) -> Result<NodeId> {
        let n_out: usize = out_shape.iter().product();
        if n_out != idx.len() {
            return Err(Error::dim(format!(
                "gather: out shape {out_shape:?} vs {} indices",
                idx.len()
            )));
        }
        let src = self.value(x).data();
        let n_in = src.len() as i64;
        let mut data = Vec::with_capacity(n_out);
        for &i in idx.iter() {
            if i >= n_in {
                return Err(Error::dim(format!("gather: index {i} out of {n_in}")));
            }
            data.push(if i < 0 { F::zero() } else { src[i as usize] });
        }
        let out = Tensor::from_vec(out_shape, data)?;
        Ok(self.push(Op::Gather { x, idx }, out))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().fold(F::zero(), |a, &v| a + v);
        self.push(Op::SumAll(x), Tensor::scalar(s))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let s = v.data().iter().fold(F::zero(), |a, &x| a + x);
        let m = s / F::from_f64(v.numel() as f64);
        self.push(Op::MeanAll(x), Tensor::scalar(m))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = Tensor::from_vec(shape, self.value(x).data().to_vec())?;
        Ok(self.push(Op::Reshape(x), out))
    }

    /// Reverse pass from a scalar loss. Every trainable parameter in `store`
    /// receives a gradient: its exact reverse-mode gradient if it was bound
    /// to this tape and reached by `loss`, zero otherwise.
    pub fn backward(&mut self, loss: NodeId, store: &mut ParameterStore<F>) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::usage(
                "backward: node is not part of this computation record",
            ));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::usage(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }

        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::scalar(F::one()));
        let mut fault_pending = self.grad_fault;

        for i in (0..=loss.0).rev() {
            let Some(dy) = self.grads[i].take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf | Op::Param(_) => {}
                Op::Add(a, b) => {
                    self.accum(a, dy.clone());
                    self.accum(b, dy.clone());
                }
                Op::Sub(a, b) => {
                    self.accum(a, dy.clone());
                    self.accum(b, map(&dy, |v| -v));
                }
                Op::Mul(a, b) => {
                    let da = zip_map(&dy, self.value(b), |g, v| g * v);
                    let db = zip_map(&dy, self.value(a), |g, v| g * v);
                    self.accum(a, da);
                    self.accum(b, db);
                }
                Op::MatMul(a, b) => {
                    let mut da = matmul_nt(&dy, self.value(b));
                    if fault_pending {
                        // scale one gradient path so a check must trip
                        for v in da.data_mut() {
                            *v *= F::from_f64(1.001);
                        }
                        fault_pending = false;
                    }
                    let db = matmul_tn(self.value(a), &dy);
                    self.accum(a, da);
                    self.accum(b, db);
                }
                Op::AddRow(x, row) => {
                    let n = self.value(row).numel();
                    let mut drow = vec![F::zero(); n];
                    for chunk in dy.data().chunks(n) {
                        for (d, &g) in drow.iter_mut().zip(chunk) {
                            *d += g;
                        }
                    }
                    self.accum(x, dy.clone());
                    self.accum(row, Tensor::from_vec(&[n], drow).expect("row grad shape"));
                }
                Op::Scale(x, c) => {
                    let k = F::from_f64(c);
                    self.accum(x, map(&dy, |v| v * k));
                }
                Op::AddConst(x, _) => self.accum(x, dy.clone()),
                Op::Relu(x) => {
                    let dx = zip_map(&dy, self.value(x), |g, v| {
                        if v > F::zero() {
                            g
                        } else {
                            F::zero()
                        }
                    });
                    self.accum(x, dx);
                }
                Op::Exp(x) => {
                    let dx = zip_map(&dy, &self.nodes[i].value, |g, y| g * y);
                    self.accum(x, dx);
                }
                Op::Abs(x) => {
                    let dx = zip_map(&dy, self.value(x), |g, v| {
                        if v > F::zero() {
                            g
                        } else if v < F::zero() {
                            -g
                        } else {
                            F::zero()
                        }
                    });
                    self.accum(x, dx);
                }
                Op::Clamp(x, lo, hi) => {
                    let (l, h) = (F::from_f64(lo), F::from_f64(hi));
                    let dx = zip_map(&dy, self.value(x), |g, v| {
                        if v > l && v < h {
                            g
                        } else {
                            F::zero()
                        }
                    });
                    self.accum(x, dx);
                }
                Op::SoftmaxRows(x) => {
                    let y = &self.nodes[i].value;
                    let n = y.n_cols();
                    let mut dx = dy.clone();
                    for (dr, yr) in dx.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                        let dot = dr
                            .iter()
                            .zip(yr)
                            .fold(F::zero(), |s, (&g, &v)| s + g * v);
                        for (d, &v) in dr.iter_mut().zip(yr) {
                            *d = v * (*d - dot);
                        }
                    }
                    self.accum(x, dx);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let (dx, dg, db) = layer_norm_backward(
                        &dy,
                        self.value(x),
                        self.value(gain),
                        F::from_f64(eps),
                    );
                    self.accum(x, dx);
                    self.accum(gain, dg);
                    self.accum(bias, db);
                }
                Op::Transpose(x) => {
                    let s = dy.shape();
                    let (m, n) = (s[0], s[1]);
                    let mut data = vec![F::zero(); m * n];
                    for i2 in 0..m {
                        for j in 0..n {
                            data[j * m + i2] = dy.data()[i2 * n + j];
                        }
                    }
                    let dx = Tensor::from_vec(&[n, m], data).expect("transpose grad shape");
                    self.accum(x, dx);
                }
                Op::ConcatRows(parts) => {
                    let n = dy.n_cols();
                    let mut start = 0;
                    for p in parts {
                        let rows = self.value(p).shape()[0];
                        let slice = dy.data()[start * n..(start + rows) * n].to_vec();
                        start += rows;
                        self.accum(
                            p,
                            Tensor::from_vec(&[rows, n], slice).expect("concat grad shape"),
                        );
                    }
                }
                Op::SliceRows { x, start } => {
                    let sx = self.value(x).shape().to_vec();
                    let n = sx[1];
                    let mut dx = Tensor::zeros(&sx);
                    dx.data_mut()[start * n..start * n + dy.numel()].copy_from_slice(dy.data());
                    self.accum(x, dx);
                }
                Op::ConcatCols(parts) => {
                    let total = dy.n_cols();
                    let m = dy.shape()[0];
                    let mut col = 0;
                    for p in parts {
                        let w = self.value(p).shape()[1];
                        let mut data = Vec::with_capacity(m * w);
                        for i2 in 0..m {
                            data.extend_from_slice(&dy.data()[i2 * total + col..i2 * total + col + w]);
                        }
                        col += w;
                        self.accum(
                            p,
                            Tensor::from_vec(&[m, w], data).expect("concat grad shape"),
                        );
                    }
                }
                Op::SliceCols { x, start } => {
                    let sx = self.value(x).shape().to_vec();
                    let (m, n) = (sx[0], sx[1]);
                    let w = dy.n_cols();
                    let mut dx = Tensor::zeros(&sx);
                    for i2 in 0..m {
                        dx.data_mut()[i2 * n + start..i2 * n + start + w]
                            .copy_from_slice(&dy.data()[i2 * w..(i2 + 1) * w]);
                    }
                    self.accum(x, dx);
                }
                Op::Gather { x, idx } => {
                    let sx = self.value(x).shape().to_vec();
                    let mut dx = Tensor::zeros(&sx);
                    for (&i2, &g) in idx.iter().zip(dy.data()) {
                        if i2 >= 0 {
                            dx.data_mut()[i2 as usize] += g;
                        }
                    }
                    self.accum(x, dx);
                }
                Op::SumAll(x) => {
                    let g = dy.data()[0];
                    let sx = self.value(x).shape().to_vec();
                    self.accum(x, Tensor::full(&sx, g));
                }
                Op::MeanAll(x) => {
                    let sx = self.value(x).shape().to_vec();
                    let n: usize = sx.iter().product();
                    let g = dy.data()[0] / F::from_f64(n as f64);
                    self.accum(x, Tensor::full(&sx, g));
                }
                Op::Reshape(x) => {
                    let sx = self.value(x).shape().to_vec();
                    let dx = Tensor::from_vec(&sx, dy.data().to_vec()).expect("reshape grad shape");
                    self.accum(x, dx);
                }
            }
            // keep the node's own gradient available for inspection
            self.grads[i] = Some(dy);
        }

        store.zero_grads();
        for &(pid, nid) in &self.bound {
            if let Some(g) = &self.grads[nid.0] {
                store.accum_grad(pid, g)?;
            }
        }
        Ok(())
    }

    fn accum(&mut self, target: NodeId, g: Tensor<F>) {
        match &mut self.grads[target.0] {
            Some(acc) => {
                debug_assert!(acc.same_shape(&g));
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

fn map<F: Scalar>(t: &Tensor<F>, f: impl Fn(F) -> F) -> Tensor<F> {
    let mut out = t.clone();
    for v in out.data_mut() {
        *v = f(*v);
    }
    out
}

fn zip_map<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    debug_assert_eq!(a.numel(), b.numel());
    let mut out = a.clone();
    for (o, &bv) in out.data_mut().iter_mut().zip(b.data()) {
        *o = f(*o, bv);
    }
    out
}

/// `A[m,k] * B[k,n]`, accumulating rows of B for cache locality.
fn matmul_nn<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let m = a.shape()[0];
    let n = b.shape()[1];
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let arow = a.row(i);
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data()[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_vec(&[m, n], out).expect("matmul shape")
}

/// `A[m,n] * B^T` where `B[k,n]` — row-by-row dot products.
fn matmul_nt<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let m = a.shape()[0];
    let k = b.shape()[0];
    let mut out = vec![F::zero(); m * k];
    for i in 0..m {
        let arow = a.row(i);
        for p in 0..k {
            let brow = b.row(p);
            let mut s = F::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * k + p] = s;
        }
    }
    Tensor::from_vec(&[m, k], out).expect("matmul shape")
}

/// `A^T * B` where `A[m,k]`, `B[m,n]`.
fn matmul_tn<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let m = a.shape()[0];
    let k = a.shape()[1];
    let n = b.shape()[1];
    let mut out = vec![F::zero(); k * n];
    for i in 0..m {
        let arow = a.row(i);
        let brow = b.row(i);
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_vec(&[k, n], out).expect("matmul shape")
}

fn layer_norm_backward<F: Scalar>(
    dy: &Tensor<F>,
    x: &Tensor<F>,
    gain: &Tensor<F>,
    eps: F,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let d = x.n_cols();
    let inv_d = F::from_f64(1.0 / d as f64);
    let rows = x.numel() / d;
    let mut dx = Tensor::zeros(x.shape());
    let mut dg = vec![F::zero(); d];
    let mut db = vec![F::zero(); d];
    let g = gain.data();
    for r in 0..rows {
        let xr = &x.data()[r * d..(r + 1) * d];
        let dyr = &dy.data()[r * d..(r + 1) * d];
        let mean = xr.iter().fold(F::zero(), |s, &v| s + v) * inv_d;
        let var = xr
            .iter()
            .fold(F::zero(), |s, &v| s + (v - mean) * (v - mean))
            * inv_d;
        let inv_sigma = (var + eps).sqrt().recip();

        // x_hat, then the two row means the dx rule needs
        let mut mean_u = F::zero();
        let mut mean_ux = F::zero();
        let mut xhat = vec![F::zero(); d];
        let mut u = vec![F::zero(); d];
        for j in 0..d {
            xhat[j] = (xr[j] - mean) * inv_sigma;
            u[j] = dyr[j] * g[j];
            mean_u += u[j];
            mean_ux += u[j] * xhat[j];
            dg[j] += dyr[j] * xhat[j];
            db[j] += dyr[j];
        }
        mean_u *= inv_d;
        mean_ux *= inv_d;
        let drow = &mut dx.data_mut()[r * d..(r + 1) * d];
        for j in 0..d {
            drow[j] = (u[j] - mean_u - xhat[j] * mean_ux) * inv_sigma;
        }
    }
    (
        dx,
        Tensor::from_vec(&[d], dg).expect("gain grad shape"),
        Tensor::from_vec(&[d], db).expect("bias grad shape"),
    )
}
