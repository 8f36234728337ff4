//! Define-by-run computation graph (Wengert tape).
//!
//! Operations evaluate eagerly and append a node per result; node ids are
//! topologically ordered by construction, so the backward pass is a single
//! reverse sweep. Attention masking happens inside `softmax_rows` so that
//! masked positions are exactly zero in the output and receive exactly zero
//! gradient — additive -inf masking is deliberately not used.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{contract, dim, Result};

use super::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    /// a (m,k) x b (k,n)
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    /// matrix (m,n) + row vector (n), broadcast over rows
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Relu(Var),
    /// keep[i*n+j] == false excludes column j from row i's softmax
    SoftmaxRows(Var, Option<Arc<Vec<bool>>>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    },
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Arc<Vec<usize>>),
    SumAll(Var),
    MeanAll(Var),
    /// mean over rows of -log softmax(logits)[label]
    CrossEntropy(Var, Arc<Vec<usize>>),
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only tape of operations; rebuilt for every forward pass.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Insert a leaf that participates in gradients.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Insert a leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// Snapshot of a node's value (cheap: shared storage).
    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn push(&self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs_grad(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    // ---- operations ------------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.is_matrix() || !vb.is_matrix() || va.cols() != vb.rows() {
            return Err(dim(format!(
                "matmul: incompatible shapes {:?} x {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        let mut out = vec![0.0; m * n];
        matmul_nn(va.data(), vb.data(), m, k, n, &mut out);
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(Op::Matmul(a, b), value, self.needs_grad(&[a, b])))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if !va.is_matrix() {
            return Err(dim(format!("transpose: expected matrix, got {:?}", va.shape())));
        }
        let (m, n) = (va.rows(), va.cols());
        let value = Tensor::matrix(n, m, transpose_raw(va.data(), m, n))?;
        Ok(self.push(Op::Transpose(a), value, self.needs_grad(&[a])))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(dim(format!(
                "add: shape mismatch {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = zip_map(va.data(), vb.data(), |x, y| x + y);
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(Op::Add(a, b), value, self.needs_grad(&[a, b])))
    }

    /// `a` is (m,n); `b` is a vector (n) or (1,n) added to every row of `a`.
    pub fn add_row(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let n = row_vector_len(&vb);
        if !va.is_matrix() || n != Some(va.cols()) {
            return Err(dim(format!(
                "add_row: shape mismatch {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let cols = va.cols();
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (x, y) in row.iter_mut().zip(vb.data()) {
                *x += y;
            }
        }
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(Op::AddRow(a, b), value, self.needs_grad(&[a, b])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(dim(format!(
                "sub: shape mismatch {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = zip_map(va.data(), vb.data(), |x, y| x - y);
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(Op::Sub(a, b), value, self.needs_grad(&[a, b])))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(dim(format!(
                "mul: shape mismatch {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = zip_map(va.data(), vb.data(), |x, y| x * y);
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(Op::Mul(a, b), value, self.needs_grad(&[a, b])))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * c).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        self.push(Op::Scale(a, c), value, self.needs_grad(&[a]))
    }

    pub fn gelu(&self, a: Var) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| gelu_fwd(x)).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        self.push(Op::Gelu(a), value, self.needs_grad(&[a]))
    }

    pub fn relu(&self, a: Var) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        self.push(Op::Relu(a), value, self.needs_grad(&[a]))
    }

    /// Row-wise softmax over a matrix. `keep[i][j] == false` excludes an entry:
    /// its output is exactly 0.0 and it receives exactly zero gradient.
    pub fn softmax_rows(&self, a: Var, keep: Option<&[bool]>) -> Result<Var> {
        let va = self.value(a);
        if !va.is_matrix() {
            return Err(dim(format!("softmax_rows: expected matrix, got {:?}", va.shape())));
        }
        let (m, n) = (va.rows(), va.cols());
        let keep = match keep {
            Some(k) => {
                if k.len() != m * n {
                    return Err(dim(format!(
                        "softmax_rows: mask length {} does not match {}x{}",
                        k.len(),
                        m,
                        n
                    )));
                }
                Some(Arc::new(k.to_vec()))
            }
            None => None,
        };
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &va.data()[i * n..(i + 1) * n];
            let krow = keep.as_ref().map(|k| &k[i * n..(i + 1) * n]);
            softmax_row(row, krow, &mut out[i * n..(i + 1) * n])
                .map_err(|_| contract(format!("softmax_rows: row {i} is fully masked")))?;
        }
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(Op::SoftmaxRows(a, keep), value, self.needs_grad(&[a])))
    }

    /// Per-row normalization over the last dimension:
    /// `y = gain * (x - mean) / sqrt(var + eps) + bias` with population variance.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        if !vx.is_matrix() {
            return Err(dim(format!("layer_norm: expected matrix, got {:?}", vx.shape())));
        }
        let d = vx.cols();
        if row_vector_len(&vg) != Some(d) || row_vector_len(&vb) != Some(d) {
            return Err(dim(format!(
                "layer_norm: gain {:?} / bias {:?} do not match width {}",
                vg.shape(),
                vb.shape(),
                d
            )));
        }
        if d < 2 {
            return Err(contract("layer_norm: row width must be >= 2".to_string()));
        }
        if eps <= 0.0 {
            return Err(contract("layer_norm: eps must be > 0".to_string()));
        }
        let m = vx.rows();
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            let row = &vx.data()[i * d..(i + 1) * d];
            let (mean, inv) = row_moments(row, eps);
            for j in 0..d {
                out[i * d + j] = vg.data()[j] * (row[j] - mean) * inv + vb.data()[j];
            }
        }
        let value = Tensor::matrix(m, d, out)?;
        Ok(self.push(
            Op::LayerNorm { x, gain, bias, eps },
            value,
            self.needs_grad(&[x, gain, bias]),
        ))
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        if !va.is_matrix() || start + len > va.rows() {
            return Err(dim(format!(
                "slice_rows: [{start}, {start}+{len}) out of bounds for {:?}",
                va.shape()
            )));
        }
        let c = va.cols();
        let data = va.data()[start * c..(start + len) * c].to_vec();
        let value = Tensor::matrix(len, c, data)?;
        Ok(self.push(Op::SliceRows(a, start), value, self.needs_grad(&[a])))
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        if !va.is_matrix() || start + len > va.cols() {
            return Err(dim(format!(
                "slice_cols: [{start}, {start}+{len}) out of bounds for {:?}",
                va.shape()
            )));
        }
        let (m, n) = (va.rows(), va.cols());
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&va.data()[i * n + start..i * n + start + len]);
        }
        let value = Tensor::matrix(m, len, data)?;
        Ok(self.push(Op::SliceCols(a, start), value, self.needs_grad(&[a])))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(contract("concat_rows: no inputs".to_string()));
        }
        let first = self.value(parts[0]);
        let c = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let vp = self.value(p);
            if !vp.is_matrix() || vp.cols() != c {
                return Err(dim(format!(
                    "concat_rows: width mismatch {:?} vs {} cols",
                    vp.shape(),
                    c
                )));
            }
            rows += vp.rows();
            data.extend_from_slice(vp.data());
        }
        let value = Tensor::matrix(rows, c, data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value, self.needs_grad(parts)))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(contract("concat_cols: no inputs".to_string()));
        }
        let first = self.value(parts[0]);
        let m = first.rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let vp = self.value(p);
                vp.cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; m * total];
        let mut offset = 0;
        for (idx, &p) in parts.iter().enumerate() {
            let vp = self.value(p);
            if !vp.is_matrix() || vp.rows() != m {
                return Err(dim(format!(
                    "concat_cols: height mismatch {:?} vs {} rows",
                    vp.shape(),
                    m
                )));
            }
            let w = widths[idx];
            for i in 0..m {
                data[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&vp.data()[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let value = Tensor::matrix(m, total, data)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value, self.needs_grad(parts)))
    }

    /// Select rows of `table` by index (with repetition allowed).
    pub fn gather_rows(&self, table: Var, idx: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        if !vt.is_matrix() {
            return Err(dim(format!("gather_rows: expected matrix, got {:?}", vt.shape())));
        }
        let (rows, c) = (vt.rows(), vt.cols());
        let mut data = Vec::with_capacity(idx.len() * c);
        for &r in idx {
            if r >= rows {
                return Err(contract(format!(
                    "gather_rows: index {r} out of range for {rows} rows"
                )));
            }
            data.extend_from_slice(&vt.data()[r * c..(r + 1) * c]);
        }
        let value = Tensor::matrix(idx.len(), c, data)?;
        Ok(self.push(
            Op::GatherRows(table, Arc::new(idx.to_vec())),
            value,
            self.needs_grad(&[table]),
        ))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let va = self.value(a);
        let value = Tensor::scalar(va.data().iter().sum());
        self.push(Op::SumAll(a), value, self.needs_grad(&[a]))
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.numel() as f64;
        let value = Tensor::scalar(va.data().iter().sum::<f64>() / n);
        self.push(Op::MeanAll(a), value, self.needs_grad(&[a]))
    }

    /// Mean cross-entropy of row-wise softmax against integer labels.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        if !vl.is_matrix() || vl.rows() != labels.len() {
            return Err(dim(format!(
                "cross_entropy: logits {:?} vs {} labels",
                vl.shape(),
                labels.len()
            )));
        }
        let (m, c) = (vl.rows(), vl.cols());
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            if label >= c {
                return Err(contract(format!(
                    "cross_entropy: label {label} out of range for {c} classes"
                )));
            }
            let row = &vl.data()[i * c..(i + 1) * c];
            total += log_sum_exp(row) - row[label];
        }
        let value = Tensor::scalar(total / m as f64);
        Ok(self.push(
            Op::CrossEntropy(logits, Arc::new(labels.to_vec())),
            value,
            self.needs_grad(&[logits]),
        ))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar loss. Gradients accumulate (sum) across
    /// fan-out and are produced for every node on a path to a `param` leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !nodes[id].requires_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            let node = &nodes[id];
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g); // keep leaf gradients
                }
                Op::Matmul(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                    if nodes[a.0].requires_grad {
                        let da = acc(&mut grads, *a, va.numel());
                        matmul_nt(&g, vb.data(), m, n, k, da);
                    }
                    if nodes[b.0].requires_grad {
                        let db = acc(&mut grads, *b, vb.numel());
                        matmul_tn(va.data(), &g, m, k, n, db);
                    }
                    grads[id] = None;
                }
                Op::Transpose(a) => {
                    let va = &nodes[a.0].value;
                    let (m, n) = (va.rows(), va.cols());
                    if nodes[a.0].requires_grad {
                        let da = acc(&mut grads, *a, va.numel());
                        // g has shape (n, m); scatter transposed
                        for i in 0..n {
                            for j in 0..m {
                                da[j * n + i] += g[i * m + j];
                            }
                        }
                    }
                    grads[id] = None;
                }
                Op::Add(a, b) => {
                    for &v in &[*a, *b] {
                        if nodes[v.0].requires_grad {
                            let dv = acc(&mut grads, v, g.len());
                            axpy(dv, &g, 1.0);
                        }
                    }
                    grads[id] = None;
                }
                Op::AddRow(a, b) => {
                    if nodes[a.0].requires_grad {
                        let da = acc(&mut grads, *a, g.len());
                        axpy(da, &g, 1.0);
                    }
                    if nodes[b.0].requires_grad {
                        let n = nodes[b.0].value.numel();
                        let db = acc(&mut grads, *b, n);
                        for row in g.chunks(n) {
                            for (d, x) in db.iter_mut().zip(row) {
                                *d += x;
                            }
                        }
                    }
                    grads[id] = None;
                }
                Op::Sub(a, b) => {
                    if nodes[a.0].requires_grad {
                        let da = acc(&mut grads, *a, g.len());
                        axpy(da, &g, 1.0);
                    }
                    if nodes[b.0].requires_grad {
                        let db = acc(&mut grads, *b, g.len());
                        axpy(db, &g, -1.0);
                    }
                    grads[id] = None;
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    if nodes[a.0].requires_grad {
                        let da = acc(&mut grads, *a, g.len());
                        for ((d, gi), y) in da.iter_mut().zip(&g).zip(vb.data()) {
                            *d += gi * y;
                        }
                    }
                    if nodes[b.0].requires_grad {
                        let db = acc(&mut grads, *b, g.len());
                        for ((d, gi), x) in db.iter_mut().zip(&g).zip(va.data()) {
                            *d += gi * x;
                        }
                    }
                    grads[id] = None;
                }
                Op::Scale(a, c) => {
                    if nodes[a.0].requires_grad {
                        let da = acc(&mut grads, *a, g.len());
                        axpy(da, &g, *c);
                    }
                    grads[id] = None;
                }
                Op::Gelu(a) => {
                    if nodes[a.0].requires_grad {
                        let va = &nodes[a.0].value;
                        let da = acc(&mut grads, *a, g.len());
                        for ((d, gi), &x) in da.iter_mut().zip(&g).zip(va.data()) {
                            *d += gi * gelu_bwd(x);
                        }
                    }
                    grads[id] = None;
                }
                Op::Relu(a) => {
                    if nodes[a.0].requires_grad {
                        let va = &nodes[a.0].value;
                        let da = acc(&mut grads, *a, g.len());
                        for ((d, gi), &x) in da.iter_mut().zip(&g).zip(va.data()) {
                            if x > 0.0 {
                                *d += gi;
                            }
                        }
                    }
                    grads[id] = None;
                }
                Op::SoftmaxRows(a, keep) => {
                    if nodes[a.0].requires_grad {
                        let p = &node.value;
                        let (m, n) = (p.rows(), p.cols());
                        let da = acc(&mut grads, *a, m * n);
                        for i in 0..m {
                            let prow = &p.data()[i * n..(i + 1) * n];
                            let grow = &g[i * n..(i + 1) * n];
                            let krow = keep.as_ref().map(|k| &k[i * n..(i + 1) * n]);
                            let mut dot = 0.0;
                            for j in 0..n {
                                if krow.map_or(true, |k| k[j]) {
                                    dot += grow[j] * prow[j];
                                }
                            }
                            for j in 0..n {
                                if krow.map_or(true, |k| k[j]) {
                                    da[i * n + j] += prow[j] * (grow[j] - dot);
                                }
                            }
                        }
                    }
                    grads[id] = None;
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let vx = &nodes[x.0].value;
                    let vg = &nodes[gain.0].value;
                    let (m, d) = (vx.rows(), vx.cols());
                    let dn = d as f64;
                    for i in 0..m {
                        let xrow = &vx.data()[i * d..(i + 1) * d];
                        let grow = &g[i * d..(i + 1) * d];
                        let (mean, inv) = row_moments(xrow, *eps);
                        // dxhat and the two row means it needs
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..d {
                            let xh = (xrow[j] - mean) * inv;
                            let dxh = grow[j] * vg.data()[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh;
                        }
                        mean_dxh /= dn;
                        mean_dxh_xh /= dn;
                        if nodes[x.0].requires_grad {
                            let dx = acc(&mut grads, *x, m * d);
                            for j in 0..d {
                                let xh = (xrow[j] - mean) * inv;
                                let dxh = grow[j] * vg.data()[j];
                                dx[i * d + j] += inv * (dxh - mean_dxh - xh * mean_dxh_xh);
                            }
                        }
                        if nodes[gain.0].requires_grad {
                            let dg = acc(&mut grads, *gain, d);
                            for j in 0..d {
                                let xh = (xrow[j] - mean) * inv;
                                dg[j] += grow[j] * xh;
                            }
                        }
                        if nodes[bias.0].requires_grad {
                            let db = acc(&mut grads, *bias, d);
                            for j in 0..d {
                                db[j] += grow[j];
                            }
                        }
                    }
                    grads[id] = None;
                }
                Op::SliceRows(a, start) => {
                    if nodes[a.0].requires_grad {
                        let va = &nodes[a.0].value;
                        let c = va.cols();
                        let da = acc(&mut grads, *a, va.numel());
                        for (offset, gi) in g.iter().enumerate() {
                            da[start * c + offset] += gi;
                        }
                    }
                    grads[id] = None;
                }
                Op::SliceCols(a, start) => {
                    if nodes[a.0].requires_grad {
                        let va = &nodes[a.0].value;
                        let (m, n) = (va.rows(), va.cols());
                        let w = node.value.cols();
                        let da = acc(&mut grads, *a, m * n);
                        for i in 0..m {
                            for j in 0..w {
                                da[i * n + start + j] += g[i * w + j];
                            }
                        }
                    }
                    grads[id] = None;
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let np = nodes[p.0].value.numel();
                        if nodes[p.0].requires_grad {
                            let dp = acc(&mut grads, p, np);
                            axpy(dp, &g[offset..offset + np], 1.0);
                        }
                        offset += np;
                    }
                    grads[id] = None;
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.cols();
                    let m = node.value.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let w = nodes[p.0].value.cols();
                        if nodes[p.0].requires_grad {
                            let dp = acc(&mut grads, p, m * w);
                            for i in 0..m {
                                for j in 0..w {
                                    dp[i * w + j] += g[i * total + offset + j];
                                }
                            }
                        }
                        offset += w;
                    }
                    grads[id] = None;
                }
                Op::GatherRows(table, idx) => {
                    if nodes[table.0].requires_grad {
                        let vt = &nodes[table.0].value;
                        let c = vt.cols();
                        let dt = acc(&mut grads, *table, vt.numel());
                        for (pos, &r) in idx.iter().enumerate() {
                            for j in 0..c {
                                dt[r * c + j] += g[pos * c + j];
                            }
                        }
                    }
                    grads[id] = None;
                }
                Op::SumAll(a) => {
                    if nodes[a.0].requires_grad {
                        let n = nodes[a.0].value.numel();
                        let da = acc(&mut grads, *a, n);
                        for d in da.iter_mut() {
                            *d += g[0];
                        }
                    }
                    grads[id] = None;
                }
                Op::MeanAll(a) => {
                    if nodes[a.0].requires_grad {
                        let n = nodes[a.0].value.numel();
                        let da = acc(&mut grads, *a, n);
                        let s = g[0] / n as f64;
                        for d in da.iter_mut() {
                            *d += s;
                        }
                    }
                    grads[id] = None;
                }
                Op::CrossEntropy(logits, labels) => {
                    if nodes[logits.0].requires_grad {
                        let vl = &nodes[logits.0].value;
                        let (m, c) = (vl.rows(), vl.cols());
                        let dl = acc(&mut grads, *logits, m * c);
                        let scale = g[0] / m as f64;
                        let mut probs = vec![0.0; c];
                        for (i, &label) in labels.iter().enumerate() {
                            let row = &vl.data()[i * c..(i + 1) * c];
                            softmax_row(row, None, &mut probs).expect("non-empty row");
                            for j in 0..c {
                                let indicator = if j == label { 1.0 } else { 0.0 };
                                dl[i * c + j] += scale * (probs[j] - indicator);
                            }
                        }
                    }
                    grads[id] = None;
                }
            }
        }

        // Re-collect leaf gradients into tensors.
        let mut out = vec![None; nodes.len()];
        for (id, slot) in grads.into_iter().enumerate() {
            if let Some(data) = slot {
                let shape = nodes[id].value.shape().to_vec();
                out[id] = Some(Tensor::new(shape, data).expect("gradient shape matches value"));
            }
        }
        Ok(Gradients { by_node: out })
    }
}

/// Gradients keyed by graph node, as returned by [`Graph::backward`].
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_node.get(v.0).and_then(|t| t.as_ref())
    }
}

// ---- kernels ---------------------------------------------------------

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, numel: usize) -> &'a mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; numel])
}

fn axpy(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn row_vector_len(t: &Tensor) -> Option<usize> {
    match t.shape() {
        [n] => Some(*n),
        [1, n] => Some(*n),
        _ => None,
    }
}

/// c += a x b; a is (m,k), b is (k,n), c is (m,n). Row i of c depends only on
/// row i of a, with fixed k-order accumulation, which keeps per-row results
/// bit-identical regardless of which other rows are present.
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] += aik * brow[j];
            }
        }
    }
}

/// c += a x b^T; a is (m,k), b is (n,k), c is (m,n).
fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cj) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for kk in 0..k {
                s += arow[kk] * brow[kk];
            }
            *cj += s;
        }
    }
}

/// c += a^T x b; a is (m,k), b is (m,n), c is (k,n).
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let crow = &mut c[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] += aik * brow[j];
            }
        }
    }
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Numerically stable softmax of one row; `Err(())` when everything is masked.
fn softmax_row(row: &[f64], keep: Option<&[bool]>, out: &mut [f64]) -> std::result::Result<(), ()> {
    let kept = |j: usize| keep.map_or(true, |k| k[j]);
    let mut max = f64::NEG_INFINITY;
    for (j, &x) in row.iter().enumerate() {
        if kept(j) && x > max {
            max = x;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(());
    }
    let mut sum = 0.0;
    for (j, &x) in row.iter().enumerate() {
        if kept(j) {
            let e = (x - max).exp();
            out[j] = e;
            sum += e;
        } else {
            out[j] = 0.0;
        }
    }
    for (j, o) in out.iter_mut().enumerate() {
        if kept(j) {
            *o /= sum;
        }
    }
    Ok(())
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

// Tanh formulation of gelu; the 0.044715 cubic coefficient is the standard
// constant of this approximation.
const GELU_C: f64 = 0.044715;

fn gelu_fwd(x: f64) -> f64 {
    let s = (2.0 / std::f64::consts::PI).sqrt();
    let u = s * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let s = (2.0 / std::f64::consts::PI).sqrt();
    let u = s * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = s * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
