//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive as it is evaluated. Parameters enter the
//! tape by reference (no copy) and are tagged with their index in the owning
//! parameter store, so [`Tape::backward_into`] can accumulate adjoints straight
//! into a gradient buffer. Nodes that do not depend on any trainable leaf are
//! skipped during the backward sweep.

use std::borrow::Cow;

use crate::error::{CmtaError, Result};
use crate::tensor::{c, dot, gemm_nn, gemm_nt, gemm_tn, Real, Tensor};

/// Norm floor used by the cosine primitive.
pub const COSINE_EPS: f64 = 1e-8;
/// Variance epsilon for layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Probability clamp applied before the logarithm in the BCE primitive.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<F> {
    Leaf { param: Option<usize> },
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, F),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    MeanRows(Var),
    SumAll(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    CosineRows {
        a: Var,
        b: Var,
        norm_a: Vec<F>,
        norm_b: Vec<F>,
    },
    Bce {
        probs: Var,
        label: u8,
    },
}

struct Node<'a, F: Real> {
    value: Cow<'a, Tensor<F>>,
    op: Op<F>,
    needs_grad: bool,
}

/// Ordered record of evaluated primitives. Single writer; create one per
/// forward pass.
pub struct Tape<'a, F: Real> {
    nodes: Vec<Node<'a, F>>,
}

impl<F: Real> Default for Tape<'_, F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints of every node reachable from the differentiated output.
pub struct Adjoints<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Adjoints<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> CmtaError {
    CmtaError::config(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl<'a, F: Real> Tape<'a, F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor<F>>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn owned(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Cow::Owned(value), op, needs_grad)
    }

    /// Trainable parameter borrowed from a parameter store slot `id`.
    pub fn param(&mut self, value: &'a Tensor<F>, id: usize) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf { param: Some(id) }, true)
    }

    /// Trainable leaf that is not part of a parameter store; its adjoint is
    /// read back through [`Adjoints::get`].
    pub fn variable(&mut self, value: Tensor<F>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf { param: None }, true)
    }

    /// Frozen input.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf { param: None }, false)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor<F>) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf { param: None }, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(shape_err("matmul", &self.shape(a), &self.shape(b)));
        }
        let out = gemm_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.owned(t, Op::MatMul(a, b), &[a, b]))
    }

    /// `a[m×k] · b[n×k]ᵀ`; the natural product for `[out×in]` weight matrices.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (n, k2)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(shape_err("matmul_bt", &self.shape(a), &self.shape(b)));
        }
        let out = gemm_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.owned(t, Op::MatMulBt(a, b), &[a, b]))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &str, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.owned(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.owned(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.owned(t, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `1×n` (or `[n]`) bias to every row of `x[m×n]`. This is the only
    /// broadcast the tape supports.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let ((m, n), (br, bc)) = (self.dims(x), self.dims(bias));
        if br != 1 || bc != n {
            return Err(shape_err("add_row", &self.shape(x), &self.shape(bias)));
        }
        let (tx, tb) = (self.value(x), self.value(bias));
        let mut data = tx.data().to_vec();
        for r in 0..m {
            for (d, &b) in data[r * n..(r + 1) * n].iter_mut().zip(tb.data()) {
                *d = *d + b;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.owned(t, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, k: F) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| v * k).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.owned(t, Op::Scale(x, k), &[x])
    }

    fn map(&mut self, x: Var, f: impl Fn(F) -> F) -> Tensor<F> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| f(v)).collect();
        Tensor::new(tx.shape().to_vec(), data).expect("same shape")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, sigmoid);
        self.owned(t, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.map(x, F::tanh);
        self.owned(t, Op::Tanh(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| if v > F::zero() { v } else { F::zero() });
        self.owned(t, Op::Relu(x), &[x])
    }

    /// Softmax over the last axis (each row).
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (m, n) = (tx.rows(), tx.cols());
        let mut data = tx.data().to_vec();
        for r in 0..m {
            softmax_in_place(&mut data[r * n..(r + 1) * n]);
        }
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.owned(t, Op::SoftmaxRows(x), &[x])
    }

    /// Concatenates along columns; all parts must share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.dims(p).0)
            .ok_or_else(|| CmtaError::config("concat_cols: no inputs"))?;
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims(p).1).collect();
        if parts.iter().any(|&p| self.dims(p).0 != rows) {
            return Err(CmtaError::config("concat_cols: row counts differ"));
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::new(vec![rows, total], data)?;
        Ok(self.owned(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if len == 0 || start + len > n {
            return Err(CmtaError::config(format!(
                "slice_cols: [{start}, {}) out of {n} columns",
                start + len
            )));
        }
        let tx = self.value(x);
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&tx.row(r)[start..start + len]);
        }
        let t = Tensor::new(vec![m, len], data)?;
        Ok(self.owned(t, Op::SliceCols { x, start }, &[x]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if len == 0 || start + len > m {
            return Err(CmtaError::config(format!(
                "slice_rows: [{start}, {}) out of {m} rows",
                start + len
            )));
        }
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let t = Tensor::new(vec![len, n], data)?;
        Ok(self.owned(t, Op::SliceRows { x, start }, &[x]))
    }

    /// Mean over rows: `[m×n] → [1×n]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (m, n) = (tx.rows(), tx.cols());
        let mut data = vec![F::zero(); n];
        for r in 0..m {
            for (d, &v) in data.iter_mut().zip(tx.row(r)) {
                *d = *d + v;
            }
        }
        let inv = F::one() / c::<F>(m as f64);
        data.iter_mut().for_each(|d| *d = *d * inv);
        let t = Tensor::new(vec![1, n], data).expect("positive");
        self.owned(t, Op::MeanRows(x), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let t = Tensor::new(vec![1, 1], vec![s]).expect("scalar");
        self.owned(t, Op::SumAll(x), &[x])
    }

    /// Row-wise layer normalization with affine `gamma`/`beta` of width `n`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.dims(gamma) != (1, n) || self.dims(beta) != (1, n) {
            return Err(shape_err("layer_norm", &self.shape(x), &self.shape(gamma)));
        }
        let eps = c::<F>(LAYER_NORM_EPS);
        let inv_n = F::one() / c::<F>(n as f64);
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let mut xhat = vec![F::zero(); m * n];
        let mut rstd = vec![F::zero(); m];
        let mut out = vec![F::zero(); m * n];
        for r in 0..m {
            let row = tx.row(r);
            let mean = row.iter().copied().sum::<F>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_n;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.owned(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Row-wise cosine similarity of `a[m×d]` and `b[m×d]` → `[m×1]`, with
    /// both norms floored at [`COSINE_EPS`].
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, d), (m2, d2)) = (self.dims(a), self.dims(b));
        if m != m2 || d != d2 {
            return Err(shape_err("cosine_rows", &self.shape(a), &self.shape(b)));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let mut norm_a = Vec::with_capacity(m);
        let mut norm_b = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m);
        for r in 0..m {
            let (ra, rb) = (ta.row(r), tb.row(r));
            let na = dot(ra, ra).sqrt();
            let nb = dot(rb, rb).sqrt();
            let eps = c::<F>(COSINE_EPS);
            out.push(dot(ra, rb) / (na.max(eps) * nb.max(eps)));
            norm_a.push(na);
            norm_b.push(nb);
        }
        let t = Tensor::new(vec![m, 1], out)?;
        Ok(self.owned(
            t,
            Op::CosineRows {
                a,
                b,
                norm_a,
                norm_b,
            },
            &[a, b],
        ))
    }

    /// Binary cross-entropy on the fake-class probability `probs[0][1]` of a
    /// `1×2` softmax output. The probability is clamped to
    /// `[PROB_EPS, 1 − PROB_EPS]`; outside that range the gradient is zero.
    pub fn bce(&mut self, probs: Var, label: u8) -> Result<Var> {
        if self.dims(probs) != (1, 2) {
            return Err(CmtaError::config(format!(
                "bce expects a 1×2 probability row, got {:?}",
                self.shape(probs)
            )));
        }
        if label > 1 {
            return Err(CmtaError::config(format!("label must be 0 or 1, got {label}")));
        }
        let p = self.value(probs).data()[1];
        let loss = bce_value(p, label);
        let t = Tensor::new(vec![1, 1], vec![loss])?;
        Ok(self.owned(t, Op::Bce { probs, label }, &[probs]))
    }

    /// Runs the backward sweep from a scalar output and returns all adjoints.
    pub fn backward(&self, output: Var) -> Adjoints<F> {
        Adjoints {
            grads: self.sweep(output),
        }
    }

    /// Runs the backward sweep and adds parameter adjoints into `grads`,
    /// indexed by the ids passed to [`Tape::param`].
    pub fn backward_into(&self, output: Var, grads: &mut [Tensor<F>]) {
        let adj = self.sweep(output);
        for (node, g) in self.nodes.iter().zip(adj) {
            if let (Op::Leaf { param: Some(id) }, Some(g)) = (&node.op, g) {
                for (d, v) in grads[*id].data_mut().iter_mut().zip(g) {
                    *d = *d + v;
                }
            }
        }
    }

    fn sweep(&self, output: Var) -> Vec<Option<Vec<F>>> {
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        let out_len = self.value(output).len();
        grads[output.0] = Some(vec![F::one(); out_len]);

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn accumulate(&self, grads: &mut [Option<Vec<F>>], v: Var, contribution: Vec<F>) {
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e = *e + c;
                }
            }
            slot => *slot = Some(contribution),
        }
    }

    fn propagate(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf { .. } => {}
            &Op::MatMul(a, b) => {
                let ((m, k), n) = (self.dims(a), self.dims(b).1);
                if self.wants(a) {
                    // dA = G · Bᵀ
                    let da = gemm_nt(g, self.value(b).data(), m, n, k);
                    self.accumulate(grads, a, da);
                }
                if self.wants(b) {
                    // dB = Aᵀ · G
                    let db = gemm_tn(self.value(a).data(), g, m, k, n);
                    self.accumulate(grads, b, db);
                }
            }
            &Op::MatMulBt(a, b) => {
                let ((m, k), n) = (self.dims(a), self.dims(b).0);
                if self.wants(a) {
                    // dA = G · B
                    let da = gemm_nn(g, self.value(b).data(), m, n, k);
                    self.accumulate(grads, a, da);
                }
                if self.wants(b) {
                    // dB = Gᵀ · A
                    let db = gemm_tn(g, self.value(a).data(), m, n, k);
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Add(a, b) => {
                if self.wants(a) {
                    self.accumulate(grads, a, g.to_vec());
                }
                if self.wants(b) {
                    self.accumulate(grads, b, g.to_vec());
                }
            }
            &Op::Sub(a, b) => {
                if self.wants(a) {
                    self.accumulate(grads, a, g.to_vec());
                }
                if self.wants(b) {
                    self.accumulate(grads, b, g.iter().map(|&v| -v).collect());
                }
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    let vb = self.value(b).data();
                    self.accumulate(grads, a, g.iter().zip(vb).map(|(&x, &y)| x * y).collect());
                }
                if self.wants(b) {
                    let va = self.value(a).data();
                    self.accumulate(grads, b, g.iter().zip(va).map(|(&x, &y)| x * y).collect());
                }
            }
            &Op::AddRow(x, bias) => {
                if self.wants(x) {
                    self.accumulate(grads, x, g.to_vec());
                }
                if self.wants(bias) {
                    let n = self.dims(bias).1;
                    let mut db = vec![F::zero(); n];
                    for row in g.chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    self.accumulate(grads, bias, db);
                }
            }
            &Op::Scale(x, k) => {
                if self.wants(x) {
                    self.accumulate(grads, x, g.iter().map(|&v| v * k).collect());
                }
            }
            &Op::Sigmoid(x) => {
                let dx = g.iter().zip(y).map(|(&gv, &s)| gv * s * (F::one() - s)).collect();
                self.accumulate(grads, x, dx);
            }
            &Op::Tanh(x) => {
                let dx = g.iter().zip(y).map(|(&gv, &t)| gv * (F::one() - t * t)).collect();
                self.accumulate(grads, x, dx);
            }
            &Op::Relu(x) => {
                let dx = g
                    .iter()
                    .zip(y)
                    .map(|(&gv, &o)| if o > F::zero() { gv } else { F::zero() })
                    .collect();
                self.accumulate(grads, x, dx);
            }
            &Op::SoftmaxRows(x) => {
                let n = node.value.cols();
                let mut dx = vec![F::zero(); g.len()];
                for ((dr, gr), yr) in dx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let s = dot(gr, yr);
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - s);
                    }
                }
                self.accumulate(grads, x, dx);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    offset += w;
                }
            }
            &Op::SliceCols { x, start } => {
                let (m, n) = self.dims(x);
                let w = node.value.cols();
                let mut dx = vec![F::zero(); m * n];
                for r in 0..m {
                    dx[r * n + start..r * n + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                self.accumulate(grads, x, dx);
            }
            &Op::SliceRows { x, start } => {
                let (m, n) = self.dims(x);
                let mut dx = vec![F::zero(); m * n];
                dx[start * n..start * n + g.len()].copy_from_slice(g);
                self.accumulate(grads, x, dx);
            }
            &Op::MeanRows(x) => {
                let (m, n) = self.dims(x);
                let inv = F::one() / c::<F>(m as f64);
                let mut dx = Vec::with_capacity(m * n);
                for _ in 0..m {
                    dx.extend(g.iter().map(|&v| v * inv));
                }
                self.accumulate(grads, x, dx);
            }
            &Op::SumAll(x) => {
                let n = self.value(x).len();
                self.accumulate(grads, x, vec![g[0]; n]);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = self.dims(*x);
                let gam = self.value(*gamma).data();
                if self.wants(*gamma) {
                    let mut dg = vec![F::zero(); n];
                    for r in 0..m {
                        for j in 0..n {
                            dg[j] = dg[j] + g[r * n + j] * xhat[r * n + j];
                        }
                    }
                    self.accumulate(grads, *gamma, dg);
                }
                if self.wants(*beta) {
                    let mut db = vec![F::zero(); n];
                    for r in 0..m {
                        for j in 0..n {
                            db[j] = db[j] + g[r * n + j];
                        }
                    }
                    self.accumulate(grads, *beta, db);
                }
                if self.wants(*x) {
                    let inv_n = F::one() / c::<F>(n as f64);
                    let mut dx = vec![F::zero(); m * n];
                    for r in 0..m {
                        let gh: Vec<F> = (0..n).map(|j| g[r * n + j] * gam[j]).collect();
                        let xh = &xhat[r * n..(r + 1) * n];
                        let mean_g = gh.iter().copied().sum::<F>() * inv_n;
                        let mean_gx = dot(&gh, xh) * inv_n;
                        for j in 0..n {
                            dx[r * n + j] = rstd[r] * (gh[j] - mean_g - xh[j] * mean_gx);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::CosineRows {
                a,
                b,
                norm_a,
                norm_b,
            } => {
                let (m, d) = self.dims(*a);
                let eps = c::<F>(COSINE_EPS);
                let (ta, tb) = (self.value(*a), self.value(*b));
                let mut da = vec![F::zero(); m * d];
                let mut db = vec![F::zero(); m * d];
                for r in 0..m {
                    let (ra, rb) = (ta.row(r), tb.row(r));
                    let (na, nb) = (norm_a[r].max(eps), norm_b[r].max(eps));
                    let s = y[r];
                    let inv = F::one() / (na * nb);
                    // The floored norm is constant below eps, so its derivative vanishes.
                    let ka = if norm_a[r] > eps { s / (na * na) } else { F::zero() };
                    let kb = if norm_b[r] > eps { s / (nb * nb) } else { F::zero() };
                    for j in 0..d {
                        da[r * d + j] = g[r] * (rb[j] * inv - ka * ra[j]);
                        db[r * d + j] = g[r] * (ra[j] * inv - kb * rb[j]);
                    }
                }
                if self.wants(*a) {
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, db);
                }
            }
            &Op::Bce { probs, label } => {
                let p = self.value(probs).data()[1];
                let lo = c::<F>(PROB_EPS);
                let hi = F::one() - lo;
                let dp = if p < lo || p > hi {
                    F::zero()
                } else if label == 1 {
                    -F::one() / p
                } else {
                    F::one() / (F::one() - p)
                };
                self.accumulate(grads, probs, vec![F::zero(), g[0] * dp]);
            }
        }
    }
}

pub fn sigmoid<F: Real>(v: F) -> F {
    // Split on sign so exp never overflows.
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

/// Max-subtracted softmax of one slice.
pub fn softmax_in_place<F: Real>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

pub fn bce_value<F: Real>(p_fake: F, label: u8) -> F {
    let lo = c::<F>(PROB_EPS);
    let p = p_fake.max(lo).min(F::one() - lo);
    if label == 1 {
        -p.ln()
    } else {
        -(F::one() - p).ln()
    }
}

/// Compares tape adjoints against central finite differences.
///
/// `f` builds a scalar output on the given tape from leaves created for each
/// entry of `params`. Returns the maximum relative error
/// `|analytic − numeric| / max(1, |analytic|, |numeric|)` over every scalar
/// entry. A non-finite loss is reported as an error.
pub fn grad_check<G>(params: &[Tensor<f64>], step: f64, f: G) -> Result<f64>
where
    G: for<'t> Fn(&mut Tape<'t, f64>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.variable(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).data()[0];
        if !v.is_finite() {
            return Err(CmtaError::Data(format!("non-finite loss {v}")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.variable(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(CmtaError::config("grad_check needs a scalar output"));
    }
    if !tape.value(out).all_finite() {
        return Err(CmtaError::Data("non-finite loss".into()));
    }
    let adj = tape.backward(out);

    let mut worst: f64 = 0.0;
    let mut work = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = adj
            .get(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; params[pi].len()]);
        for j in 0..params[pi].len() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + step;
            let up = eval(&work)?;
            work[pi].data_mut()[j] = orig - step;
            let down = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[j];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::identity(2));
        let m = tape.constant(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(t(&[vec![1.0, 2.0]]));
        let b = tape.constant(t(&[vec![3.0], vec![4.0]]));
        let p = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(p).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_config_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(CmtaError::Config(_))));
    }

    #[test]
    fn activations_at_known_points() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
        assert_eq!(0f64.tanh(), 0.0);
        assert!(sigmoid(-1000.0f64).is_finite());
        assert!(sigmoid(1000.0f64) <= 1.0);
    }

    #[test]
    fn softmax_known_values() {
        let mut r = [0.0f64, 0.0];
        softmax_in_place(&mut r);
        assert_eq!(r, [0.5, 0.5]);

        let mut r = [1000.0f64, 0.0];
        softmax_in_place(&mut r);
        assert!((r[0] - 1.0).abs() < 1e-12 && r[1] >= 0.0 && r[1] < 1e-300 + 1e-12);

        let mut r = [1f64.ln(), 2f64.ln(), 3f64.ln()];
        softmax_in_place(&mut r);
        for (got, want) in r.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn grad_check_quadratic_and_constant() {
        let x = Tensor::vector(vec![3.0]).unwrap();
        let err = grad_check(&[x.clone()], 1e-5, |tape, v| {
            let sq = tape.mul(v[0], v[0])?;
            Ok(tape.sum_all(sq))
        })
        .unwrap();
        assert!(err < 1e-8, "{err}");

        let mut tape = Tape::new();
        let v = tape.variable(x);
        let k = tape.constant(Tensor::vector(vec![7.0]).unwrap());
        let out = tape.sum_all(k);
        let adj = tape.backward(out);
        // A constant output never reaches the variable.
        assert!(adj.get(v).map_or(true, |g| g.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn reused_parameter_accumulates() {
        // f(w) = sum(w*w) + sum(w) → df/dw = 2w + 1
        let w = Tensor::vector(vec![1.5, -2.0]).unwrap();
        let mut grads = vec![Tensor::zeros(&[2])];
        let mut tape = Tape::new();
        let p = tape.param(&w, 0);
        let sq = tape.mul(p, p).unwrap();
        let s1 = tape.sum_all(sq);
        let s2 = tape.sum_all(p);
        let out = tape.add(s1, s2).unwrap();
        tape.backward_into(out, &mut grads);
        assert_eq!(grads[0].data(), &[4.0, -3.0]);
    }

    #[test]
    fn bce_known_values() {
        assert!((bce_value(0.5f64, 1) - 2f64.ln()).abs() < 1e-15);
        assert!((bce_value(0.5f64, 0) - 2f64.ln()).abs() < 1e-15);
        assert!(bce_value(1.0 - 1e-7f64, 1) < 1e-6);
        assert!(bce_value(0.0f64, 1).is_finite());
    }
}
