//! Reverse-mode tape. Rebuilt every forward pass (define-by-run); one
//! backward pass per tape. All node values are rows×cols matrices; scalars
//! are 1×1.

use super::Tensor;
use crate::error::{GrokError, Result};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// a (m×k) times b-transpose (n×k) -> m×n.
    MatMulBT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// m×n plus a broadcast 1×n row.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    /// Per-row standardization (mean 0, variance 1), no affine parameters.
    LayerNormRows(NodeId),
    SliceRows(NodeId, usize),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    /// Row lookup into a table node; backward scatter-adds.
    GatherRows(NodeId, Vec<usize>),
    Sum(NodeId),
    SumSquares(NodeId),
    /// Sum of one column over all rows -> scalar.
    ColumnSum(NodeId, usize),
    /// Mean over rows of -log softmax(row)[label], stable log-sum-exp form.
    CrossEntropyMean(NodeId, Vec<usize>),
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

const LN_EPS: f64 = 1e-8;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        (self.nodes[id].rows, self.nodes[id].cols)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].data
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id].grad.as_deref()
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, data: Vec<f64>, rg: bool) -> Result<NodeId> {
        debug_assert_eq!(rows * cols, data.len());
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(GrokError::NonFinite {
                op: op_name(&op),
                index: i,
            });
        }
        self.nodes.push(Node {
            op,
            rows,
            cols,
            data,
            requires_grad: rg,
            grad: None,
        });
        Ok(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Result<NodeId> {
        let (r, c) = t.matrix_dims();
        self.push(Op::Leaf, r, c, t.data().to_vec(), requires_grad)
    }

    pub fn leaf_matrix(
        &mut self,
        rows: usize,
        cols: usize,
        data: Vec<f64>,
        requires_grad: bool,
    ) -> Result<NodeId> {
        if rows * cols != data.len() {
            return Err(GrokError::InvalidArgument(format!(
                "leaf {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        self.push(Op::Leaf, rows, cols, data, requires_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(GrokError::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.nodes[a].data, &self.nodes[b].data, m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMul(a, b), m, n, out, rg)
    }

    /// a (m×k) · bᵀ where b is n×k.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(GrokError::ShapeMismatch {
                op: "matmul_bt",
                left: vec![m, k],
                right: vec![n, k2],
            });
        }
        let av = &self.nodes[a].data;
        let bv = &self.nodes[b].data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += av[i * k + p] * bv[j * k + p];
                }
                out[i * n + j] = acc;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMulBT(a, b), m, n, out, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    fn zip(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        if self.shape(b) != (m, n) {
            let (bm, bn) = self.shape(b);
            return Err(GrokError::ShapeMismatch {
                op: name,
                left: vec![m, n],
                right: vec![bm, bn],
            });
        }
        let out: Vec<f64> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(op, m, n, out, rg)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        let (rm, rn) = self.shape(row);
        if rm != 1 || rn != n {
            return Err(GrokError::ShapeMismatch {
                op: "add_row",
                left: vec![m, n],
                right: vec![rm, rn],
            });
        }
        let rowv = self.nodes[row].data.clone();
        let mut out = self.nodes[a].data.clone();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += rowv[j];
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(Op::AddRow(a, row), m, n, out, rg)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        let out: Vec<f64> = self.nodes[a].data.iter().map(|&x| x * c).collect();
        let rg = self.rg(a);
        self.push(Op::Scale(a, c), m, n, out, rg)
    }

    /// Elementwise max(0, x). Subgradient at exactly 0 is defined as 0.
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        let out: Vec<f64> = self.nodes[a].data.iter().map(|&x| x.max(0.0)).collect();
        let rg = self.rg(a);
        self.push(Op::Relu(a), m, n, out, rg)
    }

    /// Per-row softmax with max subtraction for stability.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        let av = &self.nodes[a].data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                z += e;
            }
            for j in 0..n {
                out[i * n + j] /= z;
            }
        }
        let rg = self.rg(a);
        self.push(Op::SoftmaxRows(a), m, n, out, rg)
    }

    pub fn layer_norm_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        let av = &self.nodes[a].data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * inv;
            }
        }
        let rg = self.rg(a);
        self.push(Op::LayerNormRows(a), m, n, out, rg)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, rows: usize) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        if start + rows > m {
            return Err(GrokError::InvalidArgument(format!(
                "slice_rows [{start}, {}) out of {m} rows",
                start + rows
            )));
        }
        let out = self.nodes[a].data[start * n..(start + rows) * n].to_vec();
        let rg = self.rg(a);
        self.push(Op::SliceRows(a, start), rows, n, out, rg)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(GrokError::InvalidArgument("concat_rows of nothing".into()));
        }
        let (_, n) = self.shape(parts[0]);
        let mut rows = 0;
        let mut out = Vec::new();
        let mut rg = false;
        for &p in parts {
            let (pm, pn) = self.shape(p);
            if pn != n {
                return Err(GrokError::ShapeMismatch {
                    op: "concat_rows",
                    left: vec![rows, n],
                    right: vec![pm, pn],
                });
            }
            rows += pm;
            out.extend_from_slice(&self.nodes[p].data);
            rg |= self.rg(p);
        }
        self.push(Op::ConcatRows(parts.to_vec()), rows, n, out, rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(GrokError::InvalidArgument("concat_cols of nothing".into()));
        }
        let (m, _) = self.shape(parts[0]);
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p).1).collect();
        let total: usize = widths.iter().sum();
        let mut rg = false;
        for &p in parts {
            let (pm, _) = self.shape(p);
            if pm != m {
                return Err(GrokError::ShapeMismatch {
                    op: "concat_cols",
                    left: vec![m, total],
                    right: vec![pm, self.shape(p).1],
                });
            }
            rg |= self.rg(p);
        }
        let mut out = vec![0.0; m * total];
        for i in 0..m {
            let mut off = 0;
            for (pi, &p) in parts.iter().enumerate() {
                let w = widths[pi];
                let src = &self.nodes[p].data[i * w..(i + 1) * w];
                out[i * total + off..i * total + off + w].copy_from_slice(src);
                off += w;
            }
        }
        self.push(Op::ConcatCols(parts.to_vec()), m, total, out, rg)
    }

    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (m, n) = self.shape(table);
        for &ix in indices {
            if ix >= m {
                return Err(GrokError::InvalidArgument(format!(
                    "gather index {ix} out of {m} rows"
                )));
            }
        }
        let mut out = Vec::with_capacity(indices.len() * n);
        for &ix in indices {
            out.extend_from_slice(&self.nodes[table].data[ix * n..(ix + 1) * n]);
        }
        let rg = self.rg(table);
        self.push(
            Op::GatherRows(table, indices.to_vec()),
            indices.len(),
            n,
            out,
            rg,
        )
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.nodes[a].data.iter().sum();
        let rg = self.rg(a);
        self.push(Op::Sum(a), 1, 1, vec![s], rg)
    }

    pub fn sum_squares(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.nodes[a].data.iter().map(|x| x * x).sum();
        let rg = self.rg(a);
        self.push(Op::SumSquares(a), 1, 1, vec![s], rg)
    }

    pub fn column_sum(&mut self, a: NodeId, col: usize) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        if col >= n {
            return Err(GrokError::InvalidArgument(format!(
                "column {col} out of {n}"
            )));
        }
        let mut s = 0.0;
        for i in 0..m {
            s += self.nodes[a].data[i * n + col];
        }
        let rg = self.rg(a);
        self.push(Op::ColumnSum(a, col), 1, 1, vec![s], rg)
    }

    /// Mean cross-entropy over rows; labels index columns.
    pub fn cross_entropy_mean(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (m, n) = self.shape(logits);
        if labels.len() != m {
            return Err(GrokError::ShapeMismatch {
                op: "cross_entropy_mean",
                left: vec![m, n],
                right: vec![labels.len()],
            });
        }
        for &y in labels {
            if y >= n {
                return Err(GrokError::LabelOutOfRange {
                    label: y,
                    classes: n,
                });
            }
        }
        let lv = &self.nodes[logits].data;
        let mut total = 0.0;
        for i in 0..m {
            let row = &lv[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            total += lse - row[labels[i]];
        }
        let rg = self.rg(logits);
        self.push(
            Op::CrossEntropyMean(logits, labels.to_vec()),
            1,
            1,
            vec![total / m as f64],
            rg,
        )
    }

    /// Propagate gradients from a scalar loss back to every requires_grad
    /// node. Consumes the tape; a second call is an error.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.consumed {
            return Err(GrokError::StaleTape);
        }
        let (lr, lc) = self.shape(loss);
        if lr * lc != 1 {
            return Err(GrokError::NonScalarLoss {
                shape: vec![lr, lc],
            });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut grads)?;
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(GrokError::NonFinite {
                    op: "backward",
                    index: i,
                });
            }
            self.nodes[id].grad = Some(g);
        }
        Ok(())
    }

    fn accum(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
        grads[id].get_or_insert_with(|| vec![0.0; len])
    }

    fn propagate(&self, id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let (_, n) = self.shape(*b);
                if self.rg(*a) {
                    // dA = dC · Bᵀ
                    let bv = &self.nodes[*b].data;
                    let da = Self::accum(grads, *a, m * k);
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * bv[p * n + j];
                            }
                            da[i * k + p] += acc;
                        }
                    }
                }
                if self.rg(*b) {
                    // dB = Aᵀ · dC
                    let av = &self.nodes[*a].data;
                    let db = Self::accum(grads, *b, k * n);
                    for i in 0..m {
                        for p in 0..k {
                            let a_ip = av[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += a_ip * g[i * n + j];
                            }
                        }
                    }
                }
            }
            Op::MatMulBT(a, b) => {
                // C = A·Bᵀ with A m×k, B n×k: dA = dC·B, dB = dCᵀ·A
                let (m, k) = self.shape(*a);
                let (n, _) = self.shape(*b);
                if self.rg(*a) {
                    let bv = &self.nodes[*b].data;
                    let da = Self::accum(grads, *a, m * k);
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += gij * bv[j * k + p];
                            }
                        }
                    }
                }
                if self.rg(*b) {
                    let av = &self.nodes[*a].data;
                    let db = Self::accum(grads, *b, n * k);
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                db[j * k + p] += gij * av[i * k + p];
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for &src in [a, b] {
                    if self.rg(src) {
                        let dst = Self::accum(grads, src, g.len());
                        for (d, &gv) in dst.iter_mut().zip(g) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    let dst = Self::accum(grads, *a, g.len());
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if self.rg(*b) {
                    let dst = Self::accum(grads, *b, g.len());
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d -= gv;
                    }
                }
            }
            Op::AddRow(a, row) => {
                let (m, n) = (node.rows, node.cols);
                if self.rg(*a) {
                    let dst = Self::accum(grads, *a, g.len());
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if self.rg(*row) {
                    let dst = Self::accum(grads, *row, n);
                    for i in 0..m {
                        for j in 0..n {
                            dst[j] += g[i * n + j];
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.rg(*a) {
                    let dst = Self::accum(grads, *a, g.len());
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d += c * gv;
                    }
                }
            }
            Op::Relu(a) => {
                if self.rg(*a) {
                    let av = &self.nodes[*a].data;
                    let dst = Self::accum(grads, *a, g.len());
                    for i in 0..g.len() {
                        if av[i] > 0.0 {
                            dst[i] += g[i];
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if self.rg(*a) {
                    let (m, n) = (node.rows, node.cols);
                    let y = &node.data;
                    let dst = Self::accum(grads, *a, m * n);
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                        for j in 0..n {
                            dst[i * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNormRows(a) => {
                if self.rg(*a) {
                    let (m, n) = (node.rows, node.cols);
                    let av = &self.nodes[*a].data;
                    let dst = Self::accum(grads, *a, m * n);
                    let nf = n as f64;
                    for i in 0..m {
                        let row = &av[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let mean = row.iter().sum::<f64>() / nf;
                        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / nf;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        let y: Vec<f64> = row.iter().map(|x| (x - mean) * inv).collect();
                        let gsum: f64 = gr.iter().sum();
                        let gydot: f64 = gr.iter().zip(&y).map(|(&gv, &yv)| gv * yv).sum();
                        for j in 0..n {
                            dst[i * n + j] += inv * (gr[j] - gsum / nf - y[j] * gydot / nf);
                        }
                    }
                }
            }
            Op::SliceRows(a, start) => {
                if self.rg(*a) {
                    let (_, n) = self.shape(*a);
                    let total = self.nodes[*a].data.len();
                    let dst = Self::accum(grads, *a, total);
                    for (i, &gv) in g.iter().enumerate() {
                        dst[start * n + i] += gv;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p].data.len();
                    if self.rg(p) {
                        let dst = Self::accum(grads, p, len);
                        for i in 0..len {
                            dst[i] += g[off + i];
                        }
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let m = node.rows;
                let total = node.cols;
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.rg(p) {
                        let dst = Self::accum(grads, p, m * w);
                        for i in 0..m {
                            for j in 0..w {
                                dst[i * w + j] += g[i * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::GatherRows(table, indices) => {
                if self.rg(*table) {
                    let (_, n) = self.shape(*table);
                    let total = self.nodes[*table].data.len();
                    let dst = Self::accum(grads, *table, total);
                    for (r, &ix) in indices.iter().enumerate() {
                        for j in 0..n {
                            dst[ix * n + j] += g[r * n + j];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if self.rg(*a) {
                    let len = self.nodes[*a].data.len();
                    let dst = Self::accum(grads, *a, len);
                    for d in dst.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::SumSquares(a) => {
                if self.rg(*a) {
                    let av = &self.nodes[*a].data;
                    let dst = Self::accum(grads, *a, av.len());
                    for (d, &x) in dst.iter_mut().zip(av) {
                        *d += 2.0 * x * g[0];
                    }
                }
            }
            Op::ColumnSum(a, col) => {
                if self.rg(*a) {
                    let (m, n) = self.shape(*a);
                    let dst = Self::accum(grads, *a, m * n);
                    for i in 0..m {
                        dst[i * n + col] += g[0];
                    }
                }
            }
            Op::CrossEntropyMean(logits, labels) => {
                if self.rg(*logits) {
                    let (m, n) = self.shape(*logits);
                    let lv = &self.nodes[*logits].data;
                    let dst = Self::accum(grads, *logits, m * n);
                    let scale = g[0] / m as f64;
                    for i in 0..m {
                        let row = &lv[i * n..(i + 1) * n];
                        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
                        for j in 0..n {
                            let p = (row[j] - mx).exp() / z;
                            let onehot = if j == labels[i] { 1.0 } else { 0.0 };
                            dst[i * n + j] += scale * (p - onehot);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::MatMulBT(..) => "matmul_bt",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::AddRow(..) => "add_row",
        Op::Scale(..) => "scale",
        Op::Relu(..) => "relu",
        Op::SoftmaxRows(..) => "softmax_rows",
        Op::LayerNormRows(..) => "layer_norm_rows",
        Op::SliceRows(..) => "slice_rows",
        Op::ConcatRows(..) => "concat_rows",
        Op::ConcatCols(..) => "concat_cols",
        Op::GatherRows(..) => "gather_rows",
        Op::Sum(..) => "sum",
        Op::SumSquares(..) => "sum_squares",
        Op::ColumnSum(..) => "column_sum",
        Op::CrossEntropyMean(..) => "cross_entropy_mean",
    }
}

/// c += nothing; plain ikj matmul, written so the inner loop vectorizes.
fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += a_ip * brow[j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = tape
            .leaf_matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.], false)
            .unwrap();
        let b = tape
            .leaf_matrix(3, 2, vec![1., 2., 3., 4., 5., 6.], false)
            .unwrap();
        let c = tape.matmul(eye, b).unwrap();
        assert_eq!(tape.value(c), tape.value(b));
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::new();
        let a = tape.leaf_matrix(2, 2, vec![1., 2., 3., 4.], false).unwrap();
        let b = tape.leaf_matrix(2, 1, vec![0., 1.], false).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (m, k, n) = (5, 7, 3);
        let av = rand_vec(&mut rng, m * k);
        let bv = rand_vec(&mut rng, k * n);
        let mut expect = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    expect[i * n + j] += av[i * k + p] * bv[p * n + j];
                }
            }
        }
        let mut tape = Tape::new();
        let a = tape.leaf_matrix(m, k, av, false).unwrap();
        let b = tape.leaf_matrix(k, n, bv, false).unwrap();
        let c = tape.matmul(a, b).unwrap();
        for (got, want) in tape.value(c).iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf_matrix(2, 3, vec![0.0; 6], false).unwrap();
        let b = tape.leaf_matrix(2, 2, vec![0.0; 4], false).unwrap();
        match tape.matmul(a, b) {
            Err(GrokError::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn relu_values_and_all_negative_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf_matrix(1, 3, vec![-1., 0., 2.], true).unwrap();
        let r = tape.relu(a).unwrap();
        assert_eq!(tape.value(r), &[0., 0., 2.]);

        let mut tape = Tape::new();
        let a = tape.leaf_matrix(1, 3, vec![-1., -2., -3.], true).unwrap();
        let r = tape.relu(a).unwrap();
        let s = tape.sum(r).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.value(r), &[0., 0., 0.]);
        assert_eq!(tape.grad(a).unwrap(), &[0., 0., 0.]);
    }

    #[test]
    fn softmax_uniform_and_hand_case() {
        let mut tape = Tape::new();
        let a = tape.leaf_matrix(1, 4, vec![3.0; 4], false).unwrap();
        let s = tape.softmax_rows(a).unwrap();
        for &v in tape.value(s) {
            assert!((v - 0.25).abs() < 1e-12);
        }
        let b = tape.leaf_matrix(1, 2, vec![0.0, 3f64.ln()], false).unwrap();
        let s2 = tape.softmax_rows(b).unwrap();
        assert!((tape.value(s2)[0] - 0.25).abs() < 1e-12);
        assert!((tape.value(s2)[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_large_inputs_stay_finite_and_rows_sum_to_one() {
        let mut tape = Tape::new();
        let a = tape.leaf_matrix(1, 2, vec![1000.0, 1000.1], false).unwrap();
        let s = tape.softmax_rows(a).unwrap();
        let v = tape.value(s);
        assert!(v.iter().all(|x| x.is_finite()));
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn backward_sum_gives_ones_and_half_sumsq_gives_w() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let wv = rand_vec(&mut rng, 6);

        let mut tape = Tape::new();
        let w = tape.leaf_matrix(2, 3, wv.clone(), true).unwrap();
        let s = tape.sum(w).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(w).unwrap().iter().all(|&g| g == 1.0));

        let mut tape = Tape::new();
        let w = tape.leaf_matrix(2, 3, wv.clone(), true).unwrap();
        let sq = tape.sum_squares(w).unwrap();
        let half = tape.scale(sq, 0.5).unwrap();
        tape.backward(half).unwrap();
        for (g, x) in tape.grad(w).unwrap().iter().zip(&wv) {
            assert!((g - x).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_and_stale_tape() {
        let mut tape = Tape::new();
        let w = tape.leaf_matrix(2, 2, vec![1.0; 4], true).unwrap();
        assert!(matches!(
            tape.backward(w),
            Err(GrokError::NonScalarLoss { .. })
        ));

        let mut tape = Tape::new();
        let w = tape.leaf_matrix(2, 2, vec![1.0; 4], true).unwrap();
        let s = tape.sum(w).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(GrokError::StaleTape)));
    }

    #[test]
    fn fanout_accumulates_additively() {
        // loss = sum(w) + sum(w) -> grad 2 everywhere
        let mut tape = Tape::new();
        let w = tape.leaf_matrix(1, 3, vec![0.5, -0.25, 2.0], true).unwrap();
        let s1 = tape.sum(w).unwrap();
        let s2 = tape.sum(w).unwrap();
        let total = tape.add(s1, s2).unwrap();
        tape.backward(total).unwrap();
        assert!(tape.grad(w).unwrap().iter().all(|&g| g == 2.0));
    }

    /// Central finite-difference check for an arbitrary scalar-valued graph.
    fn fd_check(build: impl Fn(&mut Tape, &[f64]) -> (NodeId, NodeId), x0: &[f64]) {
        let eps = 1e-5;
        let mut tape = Tape::new();
        let (leaf, loss) = build(&mut tape, x0);
        tape.backward(loss).unwrap();
        let grad = tape.grad(leaf).unwrap().to_vec();
        for i in 0..x0.len() {
            let mut xp = x0.to_vec();
            xp[i] += eps;
            let mut xm = x0.to_vec();
            xm[i] -= eps;
            let mut tp = Tape::new();
            let (_, lp) = build(&mut tp, &xp);
            let mut tm = Tape::new();
            let (_, lm) = build(&mut tm, &xm);
            let fd = (tp.value(lp)[0] - tm.value(lm)[0]) / (2.0 * eps);
            let denom = fd.abs().max(grad[i].abs()).max(1e-8);
            assert!(
                (fd - grad[i]).abs() / denom < 1e-5,
                "coord {i}: analytic {} vs fd {fd}",
                grad[i]
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        // One composite graph touching every differentiable primitive.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = rand_vec(&mut rng, 12);
        let consts = rand_vec(&mut rng, 12);
        let bias = rand_vec(&mut rng, 3);
        fd_check(
            |tape, x| {
                let w = tape.leaf_matrix(3, 4, x.to_vec(), true).unwrap();
                let c = tape.leaf_matrix(4, 3, consts.clone(), false).unwrap();
                let b = tape.leaf_matrix(1, 3, bias.clone(), false).unwrap();
                let mm = tape.matmul(w, c).unwrap(); // 3x3
                let sm = tape.softmax_rows(mm).unwrap();
                let ln = tape.layer_norm_rows(mm).unwrap();
                let mix = tape.add(sm, ln).unwrap();
                let r = tape.relu(mix).unwrap();
                let ar = tape.add_row(r, b).unwrap();
                let sc = tape.scale(ar, 1.7).unwrap();
                let diff = tape.sub(sc, mm).unwrap();
                let top = tape.slice_rows(diff, 0, 2).unwrap();
                let bot = tape.slice_rows(diff, 1, 2).unwrap();
                let cat = tape.concat_rows(&[top, bot]).unwrap(); // 4x3
                let wide = tape.concat_cols(&[cat, cat]).unwrap(); // 4x6
                let gathered = tape.gather_rows(w, &[2, 0, 1, 1]).unwrap(); // 4x4
                let bt = tape.matmul_bt(gathered, w).unwrap(); // 4x3
                let ss = tape.sum_squares(wide).unwrap();
                let ss2 = tape.sum_squares(bt).unwrap();
                let cs = tape.column_sum(diff, 1).unwrap();
                let ce = tape.cross_entropy_mean(sc, &[0, 2, 1]).unwrap();
                let t1 = tape.add(ss, ss2).unwrap();
                let t2 = tape.add(cs, ce).unwrap();
                let t2s = tape.scale(t2, 0.5).unwrap();
                let loss = tape.add(t1, t2s).unwrap();
                (w, loss)
            },
            &x0,
        );
    }

    #[test]
    fn identical_inputs_give_bitwise_identical_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_vec(&mut rng, 12);
        let c = rand_vec(&mut rng, 12);
        let run = || {
            let mut tape = Tape::new();
            let w = tape.leaf_matrix(3, 4, x.clone(), true).unwrap();
            let k = tape.leaf_matrix(4, 3, c.clone(), false).unwrap();
            let mm = tape.matmul(w, k).unwrap();
            let sm = tape.softmax_rows(mm).unwrap();
            let loss = tape.sum_squares(sm).unwrap();
            tape.backward(loss).unwrap();
            (tape.value(loss).to_vec(), tape.grad(w).unwrap().to_vec())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
    }
}
