use std::collections::HashMap;
use std::sync::Arc;

use super::{kernels, Tensor};
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sqrt(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        /// Normalized input, then one inverse std per row.
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MeanRows(Var),
    Sum(Var),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    CrossEntropySum {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Single-threaded; independent tapes may live on different threads.
pub struct Tape {
    nodes: Vec<Node>,
    strict: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new(true)
    }
}

impl Tape {
    /// `strict` makes every op fail on NaN or infinite results.
    pub fn new(strict: bool) -> Self {
        Tape {
            nodes: Vec::new(),
            strict,
        }
    }

    pub fn strict(&self) -> bool {
        self.strict
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded op and intermediate.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.check_finite("leaf", &value)?;
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    /// Records a leaf without copying its storage. The value is trusted to
    /// be finite (model parameters are checked when they are updated).
    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Result<Var> {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    fn check_finite(&self, op: &str, t: &Tensor) -> Result<()> {
        if self.strict && !t.is_finite() {
            return Err(Error::NonFinite(op.to_string()));
        }
        Ok(())
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        self.check_finite(name, &value)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [m, n] => Ok((*m, *n)),
            other => Err(Error::dim(op, other, &[])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a length-n vector to every row of an m×n matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if ta.rank() != 2 || tr.rank() != 1 || ta.cols() != tr.numel() {
            return Err(Error::dim("add_row", ta.shape(), tr.shape()));
        }
        let n = ta.cols();
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (v, r) in chunk.iter_mut().zip(tr.data()) {
                *v += r;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("add_row", out, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|v| v * c).collect())?;
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Contract("sqrt of a negative value".into()));
        }
        let out = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|v| v.sqrt()).collect())?;
        self.push("sqrt", out, Op::Sqrt(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("gelu", out, Op::Gelu(a), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, false)
    }

    /// Row-wise softmax of a square score matrix where row `i` only sees
    /// columns `0..=i`. Masked entries are exactly zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, true)
    }

    fn softmax_impl(&mut self, a: Var, causal: bool) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() == 0 || ta.rank() > 2 {
            return Err(Error::dim("softmax", ta.shape(), &[]));
        }
        let n = ta.cols();
        if causal && (ta.rank() != 2 || ta.rows() != n) {
            return Err(Error::dim("causal_softmax", ta.shape(), &[n, n]));
        }
        let mut data = ta.data().to_vec();
        for (i, row) in data.chunks_mut(n).enumerate() {
            if causal {
                kernels::softmax_in_place(&mut row[..=i]);
                row[i + 1..].iter_mut().for_each(|v| *v = 0.0);
            } else {
                kernels::softmax_in_place(row);
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("softmax", out, Op::Softmax(a), &[a])
    }

    /// Normalizes each row to zero mean and unit (population) variance,
    /// then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layer_norm eps must be positive, got {eps}")));
        }
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if tx.rank() == 0 || tg.shape() != [d] || tb.shape() != [d] {
            return Err(Error::dim("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        self.push("layer_norm", out, op, &[x, gain, bias])
    }

    /// Mean over rows: m×n → n.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("mean_rows", a)?;
        let ta = self.value(a);
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, v) in out.iter_mut().zip(ta.row(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= m as f64);
        let out = Tensor::vector(out)?;
        self.push("mean_rows", out, Op::MeanRows(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).data().iter().sum());
        self.push("sum", out, Op::Sum(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    /// Selects rows of a matrix (embedding lookup, row permutation).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix_dims("gather_rows", table)?;
        if idx.is_empty() {
            return Err(Error::Contract("gather_rows needs at least one index".into()));
        }
        let tt = self.value(table);
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(Error::dim("gather_rows", &[m, n], &[i]));
            }
            data.extend_from_slice(tt.row(i));
        }
        let out = Tensor::new(vec![idx.len(), n], data)?;
        self.push("gather_rows", out, Op::GatherRows(table, idx.to_vec()), &[table])
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims("slice_cols", a)?;
        if len == 0 || start + len > n {
            return Err(Error::dim("slice_cols", &[m, n], &[start, len]));
        }
        let ta = self.value(a);
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&ta.row(i)[start..start + len]);
        }
        let out = Tensor::new(vec![m, len], data)?;
        self.push("slice_cols", out, Op::SliceCols(a, start), &[a])
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let (m, _) = self.matrix_dims("concat_cols", first)?;
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.matrix_dims("concat_cols", p)?;
            if pm != m {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            total += pn;
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![m, total], data)?;
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Stacks vectors (one row each) and matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let n = self.value(first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() == 0 || t.rank() > 2 || t.cols() != n {
                return Err(Error::dim("concat_rows", self.shape(first), t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, n], data)?;
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` (T×V). Returns a scalar.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (t, v) = self.matrix_dims("cross_entropy", logits)?;
        if targets.len() != t {
            return Err(Error::dim("cross_entropy", &[t, v], &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
            return Err(Error::Contract(format!("target id {bad} outside vocabulary of {v}")));
        }
        let tl = self.value(logits);
        let mut probs = tl.data().to_vec();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_mut(v).enumerate() {
            let lsm = kernels::log_softmax(tl.row(r));
            loss -= lsm[targets[r]];
            for (p, l) in row.iter_mut().zip(&lsm) {
                *p = l.exp();
            }
        }
        let op = Op::CrossEntropySum {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        self.push("cross_entropy", Tensor::scalar(loss), op, &[logits])
    }

    /// Replays the tape in reverse from a scalar `loss`, returning the
    /// gradient of every leaf that requires one. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves = HashMap::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if self.strict && g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("backward through {}", op_name(&node.op))));
            }
            self.propagate(idx, &g, &mut grads)?;
            if matches!(node.op, Op::Leaf) {
                let shape = node.value.shape().to_vec();
                leaves.insert(idx, Tensor::new(shape, g)?);
            }
        }
        Ok(Gradients { leaves })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if let Some(ga) = self.acc(grads, *a) {
                    kernels::matmul_bt_acc(g, tb.data(), m, k, n, ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    kernels::matmul_at_acc(ta.data(), g, m, k, n, gb);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (out.shape()[0], out.shape()[1]);
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[j * m + i] += g[i * n + j];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(self.acc(grads, *a), g, 1.0);
                add_into(self.acc(grads, *b), g, 1.0);
            }
            Op::Sub(a, b) => {
                add_into(self.acc(grads, *a), g, 1.0);
                add_into(self.acc(grads, *b), g, -1.0);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, gv), bv) in ga.iter_mut().zip(g).zip(tb.data()) {
                        *o += gv * bv;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((o, gv), av) in gb.iter_mut().zip(g).zip(ta.data()) {
                        *o += gv * av;
                    }
                }
            }
            Op::AddRow(a, row) => {
                add_into(self.acc(grads, *a), g, 1.0);
                if let Some(gr) = self.acc(grads, *row) {
                    let n = gr.len();
                    for chunk in g.chunks(n) {
                        for (o, gv) in gr.iter_mut().zip(chunk) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Scale(a, c) => add_into(self.acc(grads, *a), g, *c),
            Op::Sqrt(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, gv), y) in ga.iter_mut().zip(g).zip(out.data()) {
                        *o += gv / (2.0 * y);
                    }
                }
            }
            Op::Gelu(a) => {
                let ta = self.value(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, gv), &x) in ga.iter_mut().zip(g).zip(ta.data()) {
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        *o += gv * (0.5 * (1.0 + t) + 0.5 * x * dt);
                    }
                }
            }
            Op::Softmax(a) => {
                let n = out.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((go, gr), yr) in ga.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for ((o, gv), y) in go.iter_mut().zip(gr).zip(yr) {
                            *o += y * (gv - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = out.cols();
                let tg = self.value(*gain);
                if let Some(gb) = self.acc(grads, *bias) {
                    for chunk in g.chunks(d) {
                        for (o, gv) in gb.iter_mut().zip(chunk) {
                            *o += gv;
                        }
                    }
                }
                if let Some(gg) = self.acc(grads, *gain) {
                    for (chunk, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, gv), h) in gg.iter_mut().zip(chunk).zip(hrow) {
                            *o += gv * h;
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, (chunk, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let dh: Vec<f64> = chunk.iter().zip(tg.data()).map(|(gv, w)| gv * w).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += inv_std[r] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::MeanRows(a) => {
                let n = out.numel();
                if let Some(ga) = self.acc(grads, *a) {
                    let m = ga.len() / n;
                    for chunk in ga.chunks_mut(n) {
                        for (o, gv) in chunk.iter_mut().zip(g) {
                            *o += gv / m as f64;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Reshape(a) => add_into(self.acc(grads, *a), g, 1.0),
            Op::GatherRows(table, idx) => {
                let n = out.cols();
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..n {
                            gt[i * n + j] += g[r * n + j];
                        }
                    }
                }
            }
            Op::SliceCols(a, start) => {
                let (m, len) = (out.shape()[0], out.shape()[1]);
                let n = self.value(*a).cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..m {
                        for j in 0..len {
                            ga[i * n + start + j] += g[i * len + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = (out.shape()[0], out.shape()[1]);
                let mut offset = 0;
                for &p in parts {
                    let pn = self.value(p).cols();
                    if let Some(gp) = self.acc(grads, p) {
                        for i in 0..m {
                            for j in 0..pn {
                                gp[i * pn + j] += g[i * total + offset + j];
                            }
                        }
                    }
                    offset += pn;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    add_into(self.acc(grads, p), &g[offset..offset + len], 1.0);
                    offset += len;
                }
            }
            Op::CrossEntropySum { logits, targets, probs } => {
                let v = self.value(*logits).cols();
                if let Some(gl) = self.acc(grads, *logits) {
                    for (r, &y) in targets.iter().enumerate() {
                        for j in 0..v {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            gl[r * v + j] += g[0] * (probs[r * v + j] - onehot);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn add_into(dst: Option<&mut Vec<f64>>, g: &[f64], c: f64) {
    if let Some(dst) = dst {
        for (o, gv) in dst.iter_mut().zip(g) {
            *o += c * gv;
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow(..) => "add_row",
        Op::Scale(..) => "scale",
        Op::Sqrt(..) => "sqrt",
        Op::Gelu(..) => "gelu",
        Op::Softmax(..) => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::MeanRows(..) => "mean_rows",
        Op::Sum(..) => "sum",
        Op::Reshape(..) => "reshape",
        Op::GatherRows(..) => "gather_rows",
        Op::SliceCols(..) => "slice_cols",
        Op::ConcatCols(..) => "concat_cols",
        Op::ConcatRows(..) => "concat_rows",
        Op::CrossEntropySum { .. } => "cross_entropy",
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.leaves.remove(&v.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_leaf(tape: &mut Tape, data: &[f64]) -> Var {
        tape.leaf(Tensor::vector(data.to_vec()).unwrap(), true).unwrap()
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::default();
        let x = vec_leaf(&mut tape, &[1.0, -2.0, 3.5]);
        let loss = tape.sum(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_sum_of_squares_is_two_x() {
        let mut tape = Tape::default();
        let x = vec_leaf(&mut tape, &[1.0, -2.0, 3.5]);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 7.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::default();
        let x = vec_leaf(&mut tape, &[1.0, 2.0]);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn strict_mode_traps_non_finite() {
        let mut tape = Tape::new(true);
        let x = vec_leaf(&mut tape, &[1e300]);
        let err = tape.mul(x, x).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));

        let mut lax = Tape::new(false);
        let x = vec_leaf(&mut lax, &[1e300]);
        let y = lax.mul(x, x).unwrap();
        assert!(lax.value(y).data()[0].is_infinite());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::default();
        let x = vec_leaf(&mut tape, &[1.0, 2.0]);
        let c = tape.constant(Tensor::vector(vec![3.0, 4.0]).unwrap()).unwrap();
        let p = tape.mul(x, c).unwrap();
        let loss = tape.sum(p).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn layer_norm_cases() {
        let mut tape = Tape::default();
        let ones = tape.constant(Tensor::ones(&[2])).unwrap();
        let zeros = tape.constant(Tensor::zeros(&[2])).unwrap();
        let x = tape.constant(Tensor::vector(vec![1.0, 3.0]).unwrap()).unwrap();
        let y = tape.layer_norm(x, ones, zeros, 1e-12).unwrap();
        let got = tape.value(y).data();
        assert!((got[0] + 1.0).abs() < 1e-9 && (got[1] - 1.0).abs() < 1e-9);

        let c = tape.constant(Tensor::full(&[2], 7.0)).unwrap();
        let y = tape.layer_norm(c, ones, zeros, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);

        let gain0 = tape.constant(Tensor::zeros(&[2])).unwrap();
        let b = tape.constant(Tensor::full(&[2], 0.25)).unwrap();
        let y = tape.layer_norm(x, gain0, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25, 0.25]);

        assert!(tape.layer_norm(x, ones, zeros, 0.0).is_err());
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut tape = Tape::default();
        let s = tape
            .constant(Tensor::from_rows(&[[1.0, 9.0, 9.0], [0.0, 0.0, 9.0], [1.0, 2.0, 3.0]]).unwrap())
            .unwrap();
        let p = tape.causal_softmax(s).unwrap();
        let p = tape.value(p);
        assert_eq!(p.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(p.row(1), &[0.5, 0.5, 0.0]);
        assert!((p.row(2).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn clear_releases_nodes() {
        let mut tape = Tape::default();
        let x = vec_leaf(&mut tape, &[1.0]);
        tape.sum(x).unwrap();
        assert_eq!(tape.len(), 2);
        tape.clear();
        assert!(tape.is_empty());
    }
}
