//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node to the [`Tape`]; node ids are therefore a
//! topological order and [`Tape::backward`] is a single reverse sweep.

use super::{NumericsError, Tensor, HARD_SENTINEL};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    QuickGelu(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    CosineSim(Var, Var),
    LogSoftmaxRows(Var),
    PickPerRow {
        x: Var,
        cols: Vec<usize>,
    },
    LogSigmoid(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one [`Tape::backward`] sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`; zeros when `var` is unreachable.
    pub fn wrt(&self, var: Var) -> Vec<f64> {
        self.grads[var.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; self.lens[var.0]])
    }

    /// Number of nodes that received a gradient during the sweep.
    pub fn visited(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }
}

fn shape_err(msg: impl Into<String>) -> NumericsError {
    NumericsError::Shape(msg.into())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_K: f64 = 1.702;

/// Plain row-major matrix product, `a` is m×k and `b` is k×n.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
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

/// Row-wise softmax of `logits + bias` with hard-sentinel entries forced out.
pub(crate) fn masked_softmax_raw(
    logits: &[f64],
    bias: &[f64],
    n: usize,
) -> Result<Vec<f64>, NumericsError> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        let row_bias = &bias[i * n..(i + 1) * n];
        if row_bias.iter().all(|&b| b <= HARD_SENTINEL) {
            return Err(NumericsError::DegenerateRow(i));
        }
        let z: Vec<f64> = logits[i * n..(i + 1) * n]
            .iter()
            .zip(row_bias)
            .map(|(l, b)| l + b)
            .collect();
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let row = &mut out[i * n..(i + 1) * n];
        let mut total = 0.0;
        for (o, v) in row.iter_mut().zip(&z) {
            *o = (v - max).exp();
            total += *o;
        }
        for (o, b) in row.iter_mut().zip(row_bias) {
            *o /= total;
            if *b <= HARD_SENTINEL {
                assert!(*o < 1e-30, "hard-masked entry leaked probability {o}");
            }
        }
    }
    Ok(out)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let rg = t.requires_grad();
        let mut value = t.clone();
        value.clear_grad();
        self.push(value, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        let mut value = t.clone();
        value.clear_grad();
        value.set_requires_grad(false);
        self.push(value, Op::Leaf, false)
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize), NumericsError> {
        let s = self.value(v).shape();
        match s.len() {
            2 => Ok((s[0], s[1])),
            _ => Err(shape_err(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(shape_err(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::raw(vec![m, n], data), Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(format!(
                "add {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let shape = va.shape().to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::raw(shape, data), Op::Add(a, b), rg))
    }

    /// Adds a length-n row vector to every row of an m×n matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        let (m, n) = self.dims2(a)?;
        if self.value(row).len() != n {
            return Err(shape_err(format!(
                "row of length {} against {n} columns",
                self.value(row).len()
            )));
        }
        let r = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, y) in chunk.iter_mut().zip(r) {
                *x += y;
            }
        }
        let rg = self.requires(a) || self.requires(row);
        Ok(self.push(Tensor::raw(vec![m, n], data), Op::AddRow(a, row), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(format!(
                "mul {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let shape = va.shape().to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::raw(shape, data), Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|x| x * s).collect();
        let shape = v.shape().to_vec();
        let rg = self.requires(a);
        self.push(Tensor::raw(shape, data), Op::Scale(a, s), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let (m, n) = self.dims2(a)?;
        let data = transpose_raw(self.value(a).data(), m, n);
        let rg = self.requires(a);
        Ok(self.push(Tensor::raw(vec![n, m], data), Op::Transpose(a), rg))
    }

    /// Row-wise softmax of `logits + bias`. Entries of `bias` at or below
    /// [`HARD_SENTINEL`] get exactly zero probability.
    pub fn masked_softmax(&mut self, logits: Var, bias: &[f64]) -> Result<Var, NumericsError> {
        let (m, n) = self.dims2(logits)?;
        if m != n || bias.len() != n * n {
            return Err(shape_err(format!(
                "masked_softmax on {m}x{n} logits with {} bias entries",
                bias.len()
            )));
        }
        let data = masked_softmax_raw(self.value(logits).data(), bias, n)?;
        let rg = self.requires(logits);
        Ok(self.push(Tensor::raw(vec![n, n], data), Op::MaskedSoftmax(logits), rg))
    }

    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    ) -> Result<Var, NumericsError> {
        let (m, n) = self.dims2(x)?;
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(shape_err("layer_norm gain/bias must match last dimension"));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.requires(x) || self.requires(gain) || self.requires(bias);
        Ok(self.push(
            Tensor::raw(vec![m, n], out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// `x * sigmoid(1.702 x)`, the smooth GELU approximation.
    pub fn quick_gelu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| x * sigmoid(GELU_K * x)).collect();
        let shape = v.shape().to_vec();
        let rg = self.requires(a);
        self.push(Tensor::raw(shape, data), Op::QuickGelu(a), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let mut cols = None;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (m, n) = self.dims2(p)?;
            if *cols.get_or_insert(n) != n {
                return Err(shape_err("concat_rows with differing column counts"));
            }
            rows += m;
            data.extend_from_slice(self.value(p).data());
        }
        let cols = cols.ok_or_else(|| shape_err("concat_rows of nothing"))?;
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            Tensor::raw(vec![rows, cols], data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = *parts.first().ok_or_else(|| shape_err("concat_cols of nothing"))?;
        let (m, _) = self.dims2(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims2(p)?;
            if pm != m {
                return Err(shape_err("concat_cols with differing row counts"));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            Tensor::raw(vec![m, total], data),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let (m, n) = self.dims2(x)?;
        if start + len > n {
            return Err(shape_err(format!("columns {start}..{} of {n}", start + len)));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let rg = self.requires(x);
        Ok(self.push(Tensor::raw(vec![m, len], data), Op::SliceCols { x, start }, rg))
    }

    /// Gathers rows (repeats allowed) into a new matrix.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, NumericsError> {
        let (m, n) = self.dims2(x)?;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(shape_err(format!("row {r} of {m}")));
            }
            data.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        let rg = self.requires(x);
        Ok(self.push(
            Tensor::raw(vec![rows.len(), n], data),
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var, NumericsError> {
        let (m, n) = self.dims2(x)?;
        let src = self.value(x).data();
        let mut norms = Vec::with_capacity(m);
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(NumericsError::Domain(format!("row {i} has zero norm")));
            }
            norms.push(norm);
            data.extend(row.iter().map(|v| v / norm));
        }
        let rg = self.requires(x);
        Ok(self.push(Tensor::raw(vec![m, n], data), Op::NormalizeRows { x, norms }, rg))
    }

    /// Cosine similarity of two equal-length tensors, as a scalar node.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.len() != vb.len() {
            return Err(shape_err(format!(
                "cosine of lengths {} and {}",
                va.len(),
                vb.len()
            )));
        }
        let c = cosine_raw(va.data(), vb.data())?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::scalar(c), Op::CosineSim(a, b), rg))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var, NumericsError> {
        let (m, n) = self.dims2(x)?;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let lse = log_sum_exp(row);
            data.extend(row.iter().map(|v| v - lse));
        }
        let rg = self.requires(x);
        Ok(self.push(Tensor::raw(vec![m, n], data), Op::LogSoftmaxRows(x), rg))
    }

    /// Picks `x[i, cols[i]]` for every row, yielding a length-m vector.
    pub fn pick_per_row(&mut self, x: Var, cols: &[usize]) -> Result<Var, NumericsError> {
        let (m, n) = self.dims2(x)?;
        if cols.len() != m {
            return Err(shape_err(format!("{} picks for {m} rows", cols.len())));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m);
        for (i, &c) in cols.iter().enumerate() {
            if c >= n {
                return Err(shape_err(format!("column {c} of {n}")));
            }
            data.push(src[i * n + c]);
        }
        let rg = self.requires(x);
        Ok(self.push(
            Tensor::raw(vec![m], data),
            Op::PickPerRow {
                x,
                cols: cols.to_vec(),
            },
            rg,
        ))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| log_sigmoid(x)).collect();
        let shape = v.shape().to_vec();
        let rg = self.requires(a);
        self.push(Tensor::raw(shape, data), Op::LogSigmoid(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.requires(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.requires(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        if self.value(loss).len() != 1 {
            return Err(NumericsError::Contract(format!(
                "backward from non-scalar of shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.requires(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            lens: self.nodes.iter().map(|n| n.value.len()).collect(),
        })
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let nn = self.value(*b).shape()[1];
                if self.requires(*a) {
                    let bt = transpose_raw(self.value(*b).data(), k, nn);
                    acc(*a, matmul_raw(g, &bt, m, nn, k));
                }
                if self.requires(*b) {
                    let at = transpose_raw(self.value(*a).data(), m, k);
                    acc(*b, matmul_raw(&at, g, k, m, nn));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::AddRow(a, row) => {
                acc(*a, g.to_vec());
                let n = self.value(*row).len();
                let mut r = vec![0.0; n];
                for chunk in g.chunks(n) {
                    for (x, y) in r.iter_mut().zip(chunk) {
                        *x += y;
                    }
                }
                acc(*row, r);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                acc(*b, g.iter().zip(va).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|v| v * s).collect()),
            Op::Transpose(a) => {
                let (m, n) = (out.shape()[0], out.shape()[1]);
                acc(*a, transpose_raw(g, m, n));
            }
            Op::MaskedSoftmax(a) => {
                let n = out.shape()[0];
                let y = out.data();
                let mut dx = vec![0.0; n * n];
                for i in 0..n {
                    let (yr, gr) = (&y[i * n..(i + 1) * n], &g[i * n..(i + 1) * n]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*a, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, n) = (out.shape()[0], out.shape()[1]);
                let gv = self.value(*gain).data();
                if self.requires(*bias) || self.requires(*gain) {
                    let mut gb = vec![0.0; n];
                    let mut gg = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] += g[i * n + j];
                            gg[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                    acc(*bias, gb);
                    acc(*gain, gg);
                }
                if self.requires(*x) {
                    let mut dx = vec![0.0; m * n];
                    let nf = n as f64;
                    for i in 0..m {
                        let dxhat: Vec<f64> = (0..n).map(|j| g[i * n + j] * gv[j]).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat
                            .iter()
                            .enumerate()
                            .map(|(j, d)| d * xhat[i * n + j])
                            .sum();
                        for j in 0..n {
                            dx[i * n + j] =
                                inv_std[i] / nf * (nf * dxhat[j] - s1 - xhat[i * n + j] * s2);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::QuickGelu(a) => {
                let xs = self.value(*a).data();
                acc(
                    *a,
                    g.iter()
                        .zip(xs)
                        .map(|(g, &x)| {
                            let s = sigmoid(GELU_K * x);
                            g * (s + GELU_K * x * s * (1.0 - s))
                        })
                        .collect(),
                );
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = (out.shape()[0], out.shape()[1]);
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    let mut part = Vec::with_capacity(m * w);
                    for i in 0..m {
                        part.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                    }
                    acc(p, part);
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let w = out.shape()[1];
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                acc(*x, dx);
            }
            Op::SelectRows { x, rows } => {
                let n = out.shape()[1];
                let mut dx = vec![0.0; self.value(*x).len()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..n {
                        dx[r * n + j] += g[k * n + j];
                    }
                }
                acc(*x, dx);
            }
            Op::NormalizeRows { x, norms } => {
                let n = out.shape()[1];
                let y = out.data();
                let mut dx = vec![0.0; y.len()];
                for (i, norm) in norms.iter().enumerate() {
                    let (yr, gr) = (&y[i * n..(i + 1) * n], &g[i * n..(i + 1) * n]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx[i * n + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                acc(*x, dx);
            }
            Op::CosineSim(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let c = out.data()[0];
                let na = va.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = vb.iter().map(|v| v * v).sum::<f64>().sqrt();
                let g0 = g[0];
                acc(
                    *a,
                    va.iter()
                        .zip(vb)
                        .map(|(x, y)| g0 * (y / (na * nb) - c * x / (na * na)))
                        .collect(),
                );
                acc(
                    *b,
                    vb.iter()
                        .zip(va)
                        .map(|(y, x)| g0 * (x / (na * nb) - c * y / (nb * nb)))
                        .collect(),
                );
            }
            Op::LogSoftmaxRows(a) => {
                let n = out.shape()[1];
                let y = out.data();
                let mut dx = vec![0.0; y.len()];
                for i in 0..out.shape()[0] {
                    let gr = &g[i * n..(i + 1) * n];
                    let total: f64 = gr.iter().sum();
                    for j in 0..n {
                        dx[i * n + j] = gr[j] - y[i * n + j].exp() * total;
                    }
                }
                acc(*a, dx);
            }
            Op::PickPerRow { x, cols } => {
                let n = self.value(*x).shape()[1];
                let mut dx = vec![0.0; self.value(*x).len()];
                for (i, &c) in cols.iter().enumerate() {
                    dx[i * n + c] = g[i];
                }
                acc(*x, dx);
            }
            Op::LogSigmoid(a) => {
                let xs = self.value(*a).data();
                acc(
                    *a,
                    g.iter().zip(xs).map(|(g, &x)| g * sigmoid(-x)).collect(),
                );
            }
            Op::Sum(a) => acc(*a, vec![g[0]; self.value(*a).len()]),
            Op::Mean(a) => {
                let n = self.value(*a).len();
                acc(*a, vec![g[0] / n as f64; n]);
            }
        }
    }
}

/// Numerically stable `log(sum(exp(x)))`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `log(sigmoid(x))` without overflow for large |x|.
pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

pub(crate) fn cosine_raw(a: &[f64], b: &[f64]) -> Result<f64, NumericsError> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(NumericsError::Domain("cosine of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let i = tape.constant(&mat(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let a = tape.constant(&mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let ia = tape.matmul(i, a).unwrap();
        assert_eq!(tape.value(ia).data(), &[1.0, 2.0, 3.0, 4.0]);

        let b = tape.constant(&mat(&[&[0.0], &[1.0]]));
        let ab = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(ab).shape(), &[2, 1]);
        assert_eq!(tape.value(ab).data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(vec![2, 3]));
        let b = tape.constant(&Tensor::zeros(vec![2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(NumericsError::Shape(_))));
    }

    #[test]
    fn masked_softmax_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(&Tensor::zeros(vec![3, 3]));

        let open = vec![0.0; 9];
        let y = tape.masked_softmax(z, &open).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let mut hard = vec![0.0; 9];
        for i in 0..3 {
            hard[i * 3 + 2] = HARD_SENTINEL;
        }
        let y = tape.masked_softmax(z, &hard).unwrap();
        for i in 0..3 {
            assert_eq!(tape.value(y).row(i), &[0.5, 0.5, 0.0]);
        }

        let mut bias = vec![0.0; 9];
        for i in 0..3 {
            bias[i * 3 + 1] = 2f64.ln();
        }
        let y = tape.masked_softmax(z, &bias).unwrap();
        for i in 0..3 {
            let r = tape.value(y).row(i);
            assert!((r[0] - 0.25).abs() < 1e-15);
            assert!((r[1] - 0.5).abs() < 1e-15);
            assert!((r[2] - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_softmax_rejects_fully_hard_row() {
        let mut tape = Tape::new();
        let z = tape.constant(&Tensor::zeros(vec![2, 2]));
        let bias = vec![0.0, 0.0, HARD_SENTINEL, HARD_SENTINEL];
        assert!(matches!(
            tape.masked_softmax(z, &bias),
            Err(NumericsError::DegenerateRow(1))
        ));
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(&mat(&[&[3.0, 3.0, 3.0], &[1.0, -1.0, 0.0]]));
        let g = tape.constant(&Tensor::vector(vec![1.0; 3]));
        let b = tape.constant(&Tensor::vector(vec![0.0; 3]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).row(0), &[0.0, 0.0, 0.0]);

        let x = tape.constant(&mat(&[&[1.0, -1.0]]));
        let g = tape.constant(&Tensor::vector(vec![1.0; 2]));
        let b = tape.constant(&Tensor::vector(vec![0.0; 2]));
        let y = tape.layer_norm(x, g, b, 0.0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -1.0]);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let p = tape.leaf(&Tensor::zeros(vec![2, 3]).with_grad());
        let s = tape.sum(p);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(p), vec![1.0; 6]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let p = tape.leaf(&Tensor::zeros(vec![2]).with_grad());
        assert!(matches!(tape.backward(p), Err(NumericsError::Contract(_))));
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let mut tape = Tape::new();
        let p = tape.leaf(&Tensor::vector(vec![1.0, 2.0]).with_grad());
        let q = tape.leaf(&Tensor::vector(vec![3.0]).with_grad());
        let s = tape.sum(p);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(q), vec![0.0]);
    }

    #[test]
    fn cosine_grad_is_orthogonal_when_equal() {
        let a = vec![0.3, -1.2, 2.0, 0.5];
        let mut tape = Tape::new();
        let va = tape.leaf(&Tensor::vector(a.clone()).with_grad());
        let vb = tape.constant(&Tensor::vector(a.clone()));
        let c = tape.cosine_sim(va, vb).unwrap();
        assert!((tape.value(c).item().unwrap() - 1.0).abs() < 1e-15);
        let g = tape.backward(c).unwrap().wrt(va);
        let dot: f64 = g.iter().zip(&a).map(|(x, y)| x * y).sum();
        assert!(dot.abs() < 1e-12);
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_raw(&[1.0, 0.0], &[0.0, 1.0]).unwrap()).abs() < 1e-15);
        let c = cosine_raw(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(matches!(
            cosine_raw(&[0.0, 0.0], &[1.0, 1.0]),
            Err(NumericsError::Domain(_))
        ));
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) + 2f64.ln()).abs() < 1e-15);
        assert!(log_sigmoid(-800.0).is_finite());
        assert!((log_sigmoid(800.0)).abs() < 1e-300);
    }
}
