//! Reverse-mode differentiation on a Wengert tape.
//!
//! Every primitive records its inputs and output on the tape as it computes;
//! [`Tape::backward`] replays the recorded ops in reverse, accumulating
//! vector-Jacobian products into per-node gradient buffers. Each op method
//! validates shapes up front and returns [`TensorError::ShapeMismatch`] with
//! the offending shapes named.
//!
//! A tape is single-threaded; independent tapes on separate threads share
//! nothing. Gradients are zero-initialized per backward pass and accumulated
//! additively, and all reductions run left-to-right, so a replay with the
//! same inputs is bitwise identical.

use crate::tensor::{det_dot, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// out = A @ B, A: [m,k], B: [k,n]
    Matmul { a: Var, b: Var },
    /// out = A @ B^T, A: [m,k], B: [n,k]
    MatmulNT { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    /// Elementwise product.
    Mul { a: Var, b: Var },
    /// Elementwise quotient.
    Div { a: Var, b: Var },
    /// out = c * x for a compile-time constant c.
    Scale { x: Var, c: f64 },
    /// out = x * s for a scalar node s (gradient flows to both).
    MulScalar { x: Var, s: Var },
    /// out = x / s for a scalar node s.
    DivScalar { x: Var, s: Var },
    /// Row-wise softmax over the last dimension.
    Softmax { x: Var, cols: usize },
    /// Row-wise log-softmax over the last dimension.
    LogSoftmax { x: Var, cols: usize },
    /// Row-wise RMS normalization with a learnable gain vector.
    RmsNorm { x: Var, gain: Var, cols: usize },
    /// out[t] = table[ids[t]] (rows of the embedding table).
    Embedding { table: Var, ids: Vec<usize>, cols: usize },
    /// Row selection: out[t] = x[rows[t]].
    GatherRows { x: Var, rows: Vec<usize>, cols: usize },
    /// Horizontal concatenation of matrices with equal row counts.
    ConcatCols { parts: Vec<Var>, widths: Vec<usize> },
    /// Scalar dot product of two equal-length tensors.
    Dot { a: Var, b: Var },
    /// Scalar Euclidean norm.
    L2Norm { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    /// out[i,j] = x[i,j] + v[j].
    AddRowBroadcast { x: Var, v: Var },
    /// Row-wise Euclidean norms: [rows, cols] -> [rows, 1].
    RowNorms { x: Var, cols: usize },
    /// out = x * sigmoid(x), elementwise.
    Silu { x: Var },
    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    CrossEntropy { logits: Var, targets: Vec<usize>, cols: usize },
    /// Same data, new shape.
    Reshape { x: Var },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, if any gradient flowed to it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of the loss w.r.t. `v`, zeros if none flowed.
    pub fn wrt_or_zeros(&self, v: Var, numel: usize) -> Vec<f64> {
        match self.wrt(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; numel],
        }
    }
}

/// The recording tape. Create one per forward/backward pass.
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

    /// Differentiable leaf (a parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Non-differentiable leaf (data, masks, frozen weights).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        debug_assert!(!self.consumed, "recording on a consumed tape");
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(id)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Errors if any element of `v` is non-finite, naming `context`.
    pub fn check_finite(&self, v: Var, context: &str) -> Result<(), TensorError> {
        match self.value(v).first_non_finite() {
            Some(index) => Err(TensorError::NonFinite {
                context: context.to_string(),
                index,
            }),
            None => Ok(()),
        }
    }

    // ── primitives ──────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let out = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out).unwrap(), rg, Op::Matmul { a, b }))
    }

    /// `a @ b^T`; `b` is stored row-major as [n, k].
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(self.mismatch("matmul_nt", a, b));
        }
        let out = matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out).unwrap(), rg, Op::MatmulNT { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_elementwise("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_elementwise("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_elementwise("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_elementwise("div", a, b, |x, y| x / y, Op::Div { a, b })
    }

    fn zip_elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.mismatch(name, a, b));
        }
        let shape = self.value(a).shape().to_vec();
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, data).unwrap(), rg, op))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| c * v).collect()).unwrap();
        let rg = self.nodes[x.0].requires_grad;
        self.push(out, rg, Op::Scale { x, c })
    }

    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        let sv = self.value(s).item()?;
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| v * sv).collect()).unwrap();
        let rg = self.any_grad(&[x, s]);
        Ok(self.push(out, rg, Op::MulScalar { x, s }))
    }

    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        let sv = self.value(s).item()?;
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| v / sv).collect()).unwrap();
        let rg = self.any_grad(&[x, s]);
        Ok(self.push(out, rg, Op::DivScalar { x, s }))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let (rows, cols) = self.value(x).dims2()?;
        let mut out = self.value(x).data().to_vec();
        for r in 0..rows {
            softmax_row_in_place(&mut out[r * cols..(r + 1) * cols]);
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Tensor::new(shape, out).unwrap(), rg, Op::Softmax { x, cols }))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let (rows, cols) = self.value(x).dims2()?;
        let mut out = self.value(x).data().to_vec();
        for r in 0..rows {
            log_softmax_row_in_place(&mut out[r * cols..(r + 1) * cols]);
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Tensor::new(shape, out).unwrap(), rg, Op::LogSoftmax { x, cols }))
    }

    /// RMS normalization per row: `out[i,j] = gain[j] * x[i,j] / rms(x[i,:])`
    /// with `rms(v) = sqrt(mean(v^2) + 1e-6)`.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var, TensorError> {
        let (rows, cols) = self.value(x).dims2()?;
        if self.value(gain).shape() != [cols] {
            return Err(self.mismatch("rms_norm", x, gain));
        }
        let xd = self.value(x).data();
        let gd = self.value(gain).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let inv = 1.0 / rms(row);
            for c in 0..cols {
                out[r * cols + c] = gd[c] * row[c] * inv;
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.any_grad(&[x, gain]);
        Ok(self.push(Tensor::new(shape, out).unwrap(), rg, Op::RmsNorm { x, gain, cols }))
    }

    /// Embedding lookup: rows of `table` selected by token id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (vocab, cols) = self.value(table).dims2()?;
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::IndexOutOfBounds {
                    op: "embedding",
                    index: id,
                    extent: vocab,
                });
            }
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            out.extend_from_slice(&td[id * cols..(id + 1) * cols]);
        }
        let rg = self.nodes[table.0].requires_grad;
        Ok(self.push(
            Tensor::new(vec![ids.len(), cols], out).unwrap(),
            rg,
            Op::Embedding { table, ids: ids.to_vec(), cols },
        ))
    }

    /// Select rows of a matrix by index (may repeat).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let (n, cols) = self.value(x).dims2()?;
        for &r in rows {
            if r >= n {
                return Err(TensorError::IndexOutOfBounds {
                    op: "gather_rows",
                    index: r,
                    extent: n,
                });
            }
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            out.extend_from_slice(&xd[r * cols..(r + 1) * cols]);
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            Tensor::new(vec![rows.len(), cols], out).unwrap(),
            rg,
            Op::GatherRows { x, rows: rows.to_vec(), cols },
        ))
    }

    /// Concatenate matrices with identical row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let (rows, _) = self.value(parts[0]).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(self.mismatch("concat_cols", parts[0], p));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (i, &p) in parts.iter().enumerate() {
            let w = widths[i];
            let pd = self.value(p).data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&pd[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::new(vec![rows, total], out).unwrap(),
            rg,
            Op::ConcatCols { parts: parts.to_vec(), widths },
        ))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.value(a).numel() != self.value(b).numel() {
            return Err(self.mismatch("dot", a, b));
        }
        let v = det_dot(self.value(a).data(), self.value(b).data());
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::scalar(v), rg, Op::Dot { a, b }))
    }

    pub fn l2norm(&mut self, x: Var) -> Var {
        let v = crate::tensor::l2_norm(self.value(x).data());
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::scalar(v), rg, Op::L2Norm { x })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = crate::tensor::det_sum(self.value(x).data());
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::scalar(v), rg, Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let v = crate::tensor::det_sum(self.value(x).data()) / n as f64;
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::scalar(v), rg, Op::Mean { x })
    }

    /// Add a vector to every row of a matrix.
    pub fn add_row_broadcast(&mut self, x: Var, v: Var) -> Result<Var, TensorError> {
        let (rows, cols) = self.value(x).dims2()?;
        if self.value(v).numel() != cols {
            return Err(self.mismatch("add_row_broadcast", x, v));
        }
        let xd = self.value(x).data();
        let vd = self.value(v).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] = xd[r * cols + c] + vd[c];
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.any_grad(&[x, v]);
        Ok(self.push(Tensor::new(shape, out).unwrap(), rg, Op::AddRowBroadcast { x, v }))
    }

    /// Euclidean norm of every row, as a `[rows, 1]` column.
    pub fn row_norms(&mut self, x: Var) -> Result<Var, TensorError> {
        let (rows, cols) = self.value(x).dims2()?;
        let xd = self.value(x).data();
        let out: Vec<f64> = (0..rows)
            .map(|r| crate::tensor::l2_norm(&xd[r * cols..(r + 1) * cols]))
            .collect();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            Tensor::new(vec![rows, 1], out).unwrap(),
            rg,
            Op::RowNorms { x, cols },
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|&v| v * sigmoid(v)).collect(),
        )
        .unwrap();
        let rg = self.nodes[x.0].requires_grad;
        self.push(out, rg, Op::Silu { x })
    }

    /// Mean cross-entropy of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let (rows, cols) = self.value(logits).dims2()?;
        if targets.len() != rows {
            return Err(TensorError::BadShape {
                op: "cross_entropy",
                expected: "one target per logit row",
                got: vec![targets.len(), rows],
            });
        }
        for &t in targets {
            if t >= cols {
                return Err(TensorError::IndexOutOfBounds {
                    op: "cross_entropy",
                    index: t,
                    extent: cols,
                });
            }
        }
        let ld = self.value(logits).data();
        let mut nll = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let mut row = ld[r * cols..(r + 1) * cols].to_vec();
            log_softmax_row_in_place(&mut row);
            nll -= row[t];
        }
        let v = nll / rows as f64;
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            Tensor::scalar(v),
            rg,
            Op::CrossEntropy { logits, targets: targets.to_vec(), cols },
        ))
    }

    /// Same data under a new shape (element count must match).
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(TensorError::BadShape {
                op: "reshape",
                expected: "matching element count",
                got: shape,
            });
        }
        let out = Tensor::new(shape, t.data().to_vec()).unwrap();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(out, rg, Op::Reshape { x }))
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Consumes the tape for recording;
    /// values stay readable.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[id].op.clone();
            self.backward_op(&op, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => grads[v.0] = Some(delta.to_vec()),
        }
    }

    fn backward_op(&self, op: &Op, out_id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let (_, n) = self.value(*b).dims2().unwrap();
                // dA = dOut @ B^T
                let da = matmul_nt(g, self.value(*b).data(), m, n, k);
                self.accum(grads, *a, &da);
                // dB = A^T @ dOut
                let db = matmul_tn(self.value(*a).data(), g, m, k, n);
                self.accum(grads, *b, &db);
            }
            Op::MatmulNT { a, b } => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let (n, _) = self.value(*b).dims2().unwrap();
                // out = A @ B^T: dA = dOut @ B, dB = dOut^T @ A
                let da = matmul(g, self.value(*b).data(), m, n, k);
                self.accum(grads, *a, &da);
                let db = matmul_tn(g, self.value(*a).data(), m, n, k);
                self.accum(grads, *b, &db);
            }
            Op::Add { a, b } => {
                self.accum(grads, *a, g);
                self.accum(grads, *b, g);
            }
            Op::Sub { a, b } => {
                self.accum(grads, *a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.accum(grads, *b, &neg);
            }
            Op::Mul { a, b } => {
                let da: Vec<f64> = g.iter().zip(self.value(*b).data()).map(|(gi, bi)| gi * bi).collect();
                self.accum(grads, *a, &da);
                let db: Vec<f64> = g.iter().zip(self.value(*a).data()).map(|(gi, ai)| gi * ai).collect();
                self.accum(grads, *b, &db);
            }
            Op::Div { a, b } => {
                let bd = self.value(*b).data();
                let ad = self.value(*a).data();
                let da: Vec<f64> = g.iter().zip(bd).map(|(gi, bi)| gi / bi).collect();
                self.accum(grads, *a, &da);
                let db: Vec<f64> = g
                    .iter()
                    .zip(ad.iter().zip(bd))
                    .map(|(gi, (ai, bi))| -gi * ai / (bi * bi))
                    .collect();
                self.accum(grads, *b, &db);
            }
            Op::Scale { x, c } => {
                let dx: Vec<f64> = g.iter().map(|gi| c * gi).collect();
                self.accum(grads, *x, &dx);
            }
            Op::MulScalar { x, s } => {
                let sv = self.value(*s).data()[0];
                let dx: Vec<f64> = g.iter().map(|gi| gi * sv).collect();
                self.accum(grads, *x, &dx);
                let ds = det_dot(g, self.value(*x).data());
                self.accum(grads, *s, &[ds]);
            }
            Op::DivScalar { x, s } => {
                let sv = self.value(*s).data()[0];
                let dx: Vec<f64> = g.iter().map(|gi| gi / sv).collect();
                self.accum(grads, *x, &dx);
                let ds = -det_dot(g, self.value(*x).data()) / (sv * sv);
                self.accum(grads, *s, &[ds]);
            }
            Op::Softmax { x, cols } => {
                let y = self.value_by_id(out_id).data();
                let rows = y.len() / cols;
                let mut dx = vec![0.0; y.len()];
                for r in 0..rows {
                    let base = r * cols;
                    let dot = det_dot(&g[base..base + cols], &y[base..base + cols]);
                    for c in 0..*cols {
                        dx[base + c] = y[base + c] * (g[base + c] - dot);
                    }
                }
                self.accum(grads, *x, &dx);
            }
            Op::LogSoftmax { x, cols } => {
                let y = self.value_by_id(out_id).data();
                let rows = y.len() / cols;
                let mut dx = vec![0.0; y.len()];
                for r in 0..rows {
                    let base = r * cols;
                    let gsum = crate::tensor::det_sum(&g[base..base + cols]);
                    for c in 0..*cols {
                        dx[base + c] = g[base + c] - y[base + c].exp() * gsum;
                    }
                }
                self.accum(grads, *x, &dx);
            }
            Op::RmsNorm { x, gain, cols } => {
                let xd = self.value(*x).data();
                let gd = self.value(*gain).data();
                let rows = xd.len() / cols;
                let mut dx = vec![0.0; xd.len()];
                let mut dgain = vec![0.0; *cols];
                for r in 0..rows {
                    let base = r * cols;
                    let row = &xd[base..base + cols];
                    let s = 1.0 / rms(row);
                    // t = sum_i g_i * gain_i * x_i
                    let mut t = 0.0;
                    for c in 0..*cols {
                        t += g[base + c] * gd[c] * row[c];
                    }
                    let s3_over_n = s * s * s / *cols as f64;
                    for c in 0..*cols {
                        dx[base + c] = s * gd[c] * g[base + c] - s3_over_n * row[c] * t;
                        dgain[c] += g[base + c] * row[c] * s;
                    }
                }
                self.accum(grads, *x, &dx);
                self.accum(grads, *gain, &dgain);
            }
            Op::Embedding { table, ids, cols } => {
                let (vocab, _) = self.value(*table).dims2().unwrap();
                let mut dt = vec![0.0; vocab * cols];
                for (t, &id) in ids.iter().enumerate() {
                    for c in 0..*cols {
                        dt[id * cols + c] += g[t * cols + c];
                    }
                }
                self.accum(grads, *table, &dt);
            }
            Op::GatherRows { x, rows, cols } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (t, &r) in rows.iter().enumerate() {
                    for c in 0..*cols {
                        dx[r * cols + c] += g[t * cols + c];
                    }
                }
                self.accum(grads, *x, &dx);
            }
            Op::ConcatCols { parts, widths } => {
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for (i, &p) in parts.iter().enumerate() {
                    let w = widths[i];
                    let mut dp = vec![0.0; rows * w];
                    for r in 0..rows {
                        dp[r * w..(r + 1) * w]
                            .copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    self.accum(grads, p, &dp);
                    offset += w;
                }
            }
            Op::Dot { a, b } => {
                let s = g[0];
                let da: Vec<f64> = self.value(*b).data().iter().map(|bi| s * bi).collect();
                self.accum(grads, *a, &da);
                let db: Vec<f64> = self.value(*a).data().iter().map(|ai| s * ai).collect();
                self.accum(grads, *b, &db);
            }
            Op::L2Norm { x } => {
                let norm = self.value_by_id(out_id).data()[0];
                let inv = if norm > 0.0 { 1.0 / norm } else { 0.0 };
                let s = g[0];
                let dx: Vec<f64> = self.value(*x).data().iter().map(|xi| s * xi * inv).collect();
                self.accum(grads, *x, &dx);
            }
            Op::Sum { x } => {
                let dx = vec![g[0]; self.value(*x).numel()];
                self.accum(grads, *x, &dx);
            }
            Op::Mean { x } => {
                let n = self.value(*x).numel().max(1);
                let dx = vec![g[0] / n as f64; self.value(*x).numel()];
                self.accum(grads, *x, &dx);
            }
            Op::AddRowBroadcast { x, v } => {
                self.accum(grads, *x, g);
                let cols = self.value(*v).numel();
                let rows = g.len() / cols;
                let mut dv = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        dv[c] += g[r * cols + c];
                    }
                }
                self.accum(grads, *v, &dv);
            }
            Op::RowNorms { x, cols } => {
                let xd = self.value(*x).data();
                let norms = self.value_by_id(out_id).data();
                let rows = norms.len();
                let mut dx = vec![0.0; xd.len()];
                for r in 0..rows {
                    let inv = if norms[r] > 0.0 { 1.0 / norms[r] } else { 0.0 };
                    for c in 0..*cols {
                        dx[r * cols + c] = g[r] * xd[r * cols + c] * inv;
                    }
                }
                self.accum(grads, *x, &dx);
            }
            Op::Silu { x } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(gi, &xi)| {
                        let s = sigmoid(xi);
                        gi * (s + xi * s * (1.0 - s))
                    })
                    .collect();
                self.accum(grads, *x, &dx);
            }
            Op::CrossEntropy { logits, targets, cols } => {
                let ld = self.value(*logits).data();
                let rows = targets.len();
                let scale = g[0] / rows as f64;
                let mut dl = vec![0.0; ld.len()];
                for (r, &t) in targets.iter().enumerate() {
                    let base = r * cols;
                    let mut row = ld[base..base + cols].to_vec();
                    softmax_row_in_place(&mut row);
                    for c in 0..*cols {
                        dl[base + c] = row[c] * scale;
                    }
                    dl[base + t] -= scale;
                }
                self.accum(grads, *logits, &dl);
            }
            Op::Reshape { x } => {
                self.accum(grads, *x, g);
            }
        }
    }

    fn value_by_id(&self, id: usize) -> &Tensor {
        &self.nodes[id].value
    }
}

// ── numeric kernels ─────────────────────────────────────────────────────

/// `a[m,k] @ b[k,n]`, accumulating over `k` in ascending order.
fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// `a[m,k] @ b[n,k]^T`.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = det_dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// `a[m,k]^T @ b[m,n]` -> [k, n].
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[i * n..(i + 1) * n];
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn rms(row: &[f64]) -> f64 {
    let ms = det_dot(row, row) / row.len() as f64;
    (ms + 1e-6).sqrt()
}

/// In-place softmax of a slice (max-subtracted, left-to-right sums).
pub fn softmax_slice(row: &mut [f64]) {
    softmax_row_in_place(row);
}

pub(crate) fn softmax_row_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn log_softmax_row_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter() {
        sum += (v - max).exp();
    }
    let lse = max + sum.ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let v = tape.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let out = tape.matmul(eye, v).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 4.0]);
    }

    #[test]
    fn softmax_symmetry() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn l2norm_three_four_five() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let n = tape.l2norm(x);
        assert_eq!(tape.value(n).item().unwrap(), 5.0);
    }

    #[test]
    fn shape_mismatch_names_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "got: {msg}");
    }

    #[test]
    fn grad_of_dot_is_other_operand() {
        let mut tape = Tape::new();
        let r = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let c = tape.constant(Tensor::vector(vec![4.0, 5.0, 6.0]));
        let loss = tape.dot(r, c).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(r).unwrap(), &[4.0, 5.0, 6.0]);
        assert!(grads.wrt(c).is_none());
    }

    #[test]
    fn grad_of_squared_norm() {
        // loss = ||r||^2 = dot(r, r), r = [1, 2] -> grad = [2, 4]
        let mut tape = Tape::new();
        let r = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let loss = tape.dot(r, r).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(r).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn cross_entropy_grad_is_softmax_minus_onehot() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::matrix(1, 3, vec![0.1, 0.7, -0.3]).unwrap());
        let loss = tape.cross_entropy(z, &[1]).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut sm = vec![0.1, 0.7, -0.3];
        softmax_row_in_place(&mut sm);
        let g = grads.wrt(z).unwrap();
        for i in 0..3 {
            let expected = sm[i] - if i == 1 { 1.0 } else { 0.0 };
            assert!(close(g[i], expected, 1e-12), "{} vs {}", g[i], expected);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarLoss { .. }));
    }

    #[test]
    fn backward_consumes_tape() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = tape.scale(x, 3.0);
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(TensorError::TapeConsumed)));
    }

    #[test]
    fn backward_of_sum_of_losses_is_sum_of_gradients() {
        let run = |which: u8| -> Vec<f64> {
            let mut tape = Tape::new();
            let r = tape.leaf(Tensor::vector(vec![0.3, -0.8, 0.5]));
            let c = tape.constant(Tensor::vector(vec![1.0, 2.0, -1.0]));
            let l1 = tape.dot(r, c).unwrap();
            let sq = tape.mul(r, r).unwrap();
            let l2 = tape.sum(sq);
            let loss = match which {
                0 => l1,
                1 => l2,
                _ => tape.add(l1, l2).unwrap(),
            };
            let grads = tape.backward(loss).unwrap();
            grads.wrt(r).unwrap().to_vec()
        };
        let g1 = run(0);
        let g2 = run(1);
        let gsum = run(2);
        for i in 0..3 {
            assert!(close(gsum[i], g1[i] + g2[i], 1e-12));
        }
    }

    #[test]
    fn replay_is_bitwise_identical() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::matrix(3, 3, (0..9).map(|i| (i as f64).sin()).collect()).unwrap());
            let g = tape.constant(Tensor::vector(vec![1.0; 3]));
            let y = tape.rms_norm(x, g).unwrap();
            let s = tape.softmax(y).unwrap();
            let l = tape.mean(s);
            let grads = tape.backward(l).unwrap();
            (
                tape.value(l).item().unwrap().to_bits(),
                grads.wrt(x).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn embedding_rejects_out_of_range_id() {
        let mut tape = Tape::new();
        let table = tape.constant(Tensor::matrix(4, 2, vec![0.0; 8]).unwrap());
        let err = tape.embedding(table, &[5]).unwrap_err();
        assert!(matches!(err, TensorError::IndexOutOfBounds { index: 5, extent: 4, .. }));
    }
}
