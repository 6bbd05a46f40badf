//! Forward primitives and their backward rules.

use super::{matmul_acc, matmul_nt_acc, matmul_tn_acc, sigmoid};
use super::{Expr, NodeId, Result, Tape, Tensor, TensorError};

/// Epsilon inside the RMS denominator.
pub const RMS_EPS: f64 = 1e-9;

impl Tape {
    fn dims2(&self, op: &'static str, id: NodeId) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(TensorError::BadShape {
                op,
                expected: "2-d tensor",
                got: s.to_vec(),
            });
        }
        Ok((s[0], s[1]))
    }

    /// A[m,k] · B[k,n] → [m,n].
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        self.push_checked("matmul", Expr::MatMul { a, b }, Tensor::new(vec![m, n], out)?)
    }

    /// A[m,k] · B[n,k]ᵀ → [m,n].
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims2("matmul_nt", a)?;
        let (n, k2) = self.dims2("matmul_nt", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        self.push_checked(
            "matmul_nt",
            Expr::MatMulNt { a, b },
            Tensor::new(vec![m, n], out)?,
        )
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push_checked("add", Expr::Add { a, b }, Tensor::new(shape, data)?)
    }

    /// Matrix plus a bias row broadcast over rows: [r,n] + [n].
    pub fn add_bias(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, n) = self.dims2("add_bias", a)?;
        if self.shape(b) != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let bias = self.value(b).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for i in 0..r {
            for (v, bv) in data[i * n..(i + 1) * n].iter_mut().zip(&bias) {
                *v += bv;
            }
        }
        self.push_checked("add_bias", Expr::AddBias { a, b }, Tensor::new(vec![r, n], data)?)
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push_checked("mul", Expr::Mul { a, b }, Tensor::new(shape, data)?)
    }

    /// Multiply each row of [r,n] elementwise by a constant mask of length n.
    /// The mask is op metadata, not a differentiable input; masked columns
    /// get exactly zero output and exactly zero upstream gradient.
    pub fn mul_col_mask(&mut self, a: NodeId, mask: &[f64]) -> Result<NodeId> {
        let (r, n) = self.dims2("mul_col_mask", a)?;
        if mask.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "mul_col_mask",
                lhs: vec![r, n],
                rhs: vec![mask.len()],
            });
        }
        let mut data = self.value(a).data().to_vec();
        for i in 0..r {
            for (v, mv) in data[i * n..(i + 1) * n].iter_mut().zip(mask) {
                *v *= mv;
            }
        }
        self.push_checked(
            "mul_col_mask",
            Expr::MulColMask {
                a,
                mask: mask.to_vec(),
            },
            Tensor::new(vec![r, n], data)?,
        )
    }

    /// Multiply by a compile-time constant scalar.
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push_checked("scale", Expr::Scale { a, c }, Tensor::new(shape, data)?)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| -x).collect();
        let shape = self.shape(a).to_vec();
        self.push_checked("neg", Expr::Neg { a }, Tensor::new(shape, data)?)
    }

    /// Natural log; non-positive inputs produce NaN/-Inf and error out.
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x.ln()).collect();
        let shape = self.shape(a).to_vec();
        self.push_checked("log", Expr::Log { a }, Tensor::new(shape, data)?)
    }

    /// SiLU activation x·sigmoid(x).
    pub fn silu(&mut self, a: NodeId) -> Result<NodeId> {
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| x * sigmoid(x))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push_checked("silu", Expr::Silu { a }, Tensor::new(shape, data)?)
    }

    /// Sum of all elements → scalar [1].
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(a).data().iter().sum();
        self.push_checked("sum", Expr::Sum { a }, Tensor::scalar(s))
    }

    /// Row-wise softmax over the last axis of [r,n], with max subtraction.
    pub fn row_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, n) = self.dims2("row_softmax", a)?;
        let x = self.value(a).data();
        let mut data = vec![0.0; r * n];
        for i in 0..r {
            let row = &x[i * n..(i + 1) * n];
            let out = &mut data[i * n..(i + 1) * n];
            softmax_row(row, out);
        }
        self.push_checked(
            "row_softmax",
            Expr::RowSoftmax { a },
            Tensor::new(vec![r, n], data)?,
        )
    }

    /// Softmax over the causal prefix of a square score matrix: row `t`
    /// is a distribution over columns `0..=t`, zero beyond. Keeps the
    /// tape free of -inf sentinels.
    pub fn causal_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, n) = self.dims2("causal_softmax", a)?;
        if r != n {
            return Err(TensorError::BadShape {
                op: "causal_softmax",
                expected: "square matrix",
                got: vec![r, n],
            });
        }
        let x = self.value(a).data();
        let mut data = vec![0.0; r * n];
        for t in 0..r {
            let row = &x[t * n..t * n + t + 1];
            let out = &mut data[t * n..t * n + t + 1];
            softmax_row(row, out);
        }
        self.push_checked(
            "causal_softmax",
            Expr::CausalSoftmax { a },
            Tensor::new(vec![r, n], data)?,
        )
    }

    /// Row-wise log-softmax over the last axis of [r,n].
    pub fn row_log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, n) = self.dims2("row_log_softmax", a)?;
        let x = self.value(a).data();
        let mut data = vec![0.0; r * n];
        for i in 0..r {
            let row = &x[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (o, v) in data[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        self.push_checked(
            "row_log_softmax",
            Expr::RowLogSoftmax { a },
            Tensor::new(vec![r, n], data)?,
        )
    }

    /// RMS normalization of each row of [r,d], scaled by a gain vector [d]:
    /// y = x / sqrt(mean(x²) + eps) ⊙ g.
    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId) -> Result<NodeId> {
        let (r, d) = self.dims2("rms_norm", x)?;
        if self.shape(gain) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "rms_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let mut data = vec![0.0; r * d];
        for i in 0..r {
            let row = &xv[i * d..(i + 1) * d];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            for j in 0..d {
                data[i * d + j] = row[j] * inv * g[j];
            }
        }
        self.push_checked(
            "rms_norm",
            Expr::RmsNorm {
                x,
                gain,
                eps: RMS_EPS,
            },
            Tensor::new(vec![r, d], data)?,
        )
    }

    /// Row lookup: table [v,d] gathered at `ids` → [len(ids), d].
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, d) = self.dims2("embedding", table)?;
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    size: v,
                });
            }
            data.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        self.push_checked(
            "embedding",
            Expr::Embedding {
                table,
                ids: ids.to_vec(),
            },
            Tensor::new(vec![ids.len(), d], data)?,
        )
    }

    /// Columns [start, start+len) of a [r,n] matrix.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, n) = self.dims2("slice_cols", a)?;
        if start + len > n {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                size: n,
            });
        }
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&x[i * n + start..i * n + start + len]);
        }
        self.push_checked(
            "slice_cols",
            Expr::SliceCols { a, start, len },
            Tensor::new(vec![r, len], data)?,
        )
    }

    /// Concatenate matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(TensorError::BadShape {
                op: "concat_cols",
                expected: "at least one part",
                got: vec![],
            });
        }
        let (r, _) = self.dims2("concat_cols", parts[0])?;
        let mut total = 0;
        for &p in parts {
            let (rp, np) = self.dims2("concat_cols", p)?;
            if rp != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            total += np;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let np = self.shape(p)[1];
                let pv = self.value(p).data();
                data.extend_from_slice(&pv[i * np..(i + 1) * np]);
            }
        }
        self.push_checked(
            "concat_cols",
            Expr::ConcatCols {
                parts: parts.to_vec(),
            },
            Tensor::new(vec![r, total], data)?,
        )
    }

    /// Mean of the masked entries of a vector [n]: (1/Z)·Σ mask_t·x_t with
    /// Z the number of true entries. Entries with a false mask are never
    /// read, so their values cannot influence the result.
    pub fn masked_mean(&mut self, a: NodeId, mask: &[bool]) -> Result<NodeId> {
        let s = self.shape(a);
        if s.len() != 1 {
            return Err(TensorError::BadShape {
                op: "masked_mean",
                expected: "1-d tensor",
                got: s.to_vec(),
            });
        }
        if mask.len() != s[0] {
            return Err(TensorError::ShapeMismatch {
                op: "masked_mean",
                lhs: s.to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let z = mask.iter().filter(|m| **m).count();
        if z == 0 {
            return Err(TensorError::BadShape {
                op: "masked_mean",
                expected: "at least one true mask entry",
                got: vec![0],
            });
        }
        let x = self.value(a).data();
        let mut acc = 0.0;
        for (v, m) in x.iter().zip(mask) {
            if *m {
                acc += v;
            }
        }
        self.push_checked(
            "masked_mean",
            Expr::MaskedMean {
                a,
                mask: mask.to_vec(),
            },
            Tensor::scalar(acc / z as f64),
        )
    }

    /// Per-row element pick: x [r,n] and idx [r] → vector of x[i, idx[i]].
    pub fn take_per_row(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let (r, n) = self.dims2("take_per_row", a)?;
        if idx.len() != r {
            return Err(TensorError::ShapeMismatch {
                op: "take_per_row",
                lhs: vec![r, n],
                rhs: vec![idx.len()],
            });
        }
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(r);
        for (i, &j) in idx.iter().enumerate() {
            if j >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "take_per_row",
                    index: j,
                    size: n,
                });
            }
            data.push(x[i * n + j]);
        }
        self.push_checked(
            "take_per_row",
            Expr::TakePerRow {
                a,
                idx: idx.to_vec(),
            },
            Tensor::new(vec![r], data)?,
        )
    }

    /// Rotary position encoding applied in place over [t, h·d_head]:
    /// row index is the position, every d_head-wide head block is rotated
    /// pairwise with angle pos · base^(-2j/d_head).
    pub fn rope(&mut self, a: NodeId, d_head: usize, base: f64) -> Result<NodeId> {
        let (t, w) = self.dims2("rope", a)?;
        if d_head == 0 || d_head % 2 != 0 || w % d_head != 0 {
            return Err(TensorError::BadShape {
                op: "rope",
                expected: "width divisible by even d_head",
                got: vec![t, w],
            });
        }
        let mut data = self.value(a).data().to_vec();
        rope_apply(&mut data, t, w, d_head, base, false);
        self.push_checked(
            "rope",
            Expr::Rope { a, d_head, base },
            Tensor::new(vec![t, w], data)?,
        )
    }

    pub(super) fn step_backward(&mut self, id: NodeId) {
        // Split borrows: take the grad of `id` by value (cheap clone of
        // the slot is avoided by a temporary swap).
        let grad = std::mem::take(&mut self.nodes[id].grad);
        let expr = self.nodes[id].expr.clone();
        match expr {
            Expr::Leaf => {}
            Expr::MatMul { a, b } => {
                let s_a = self.shape(a).to_vec();
                let s_b = self.shape(b).to_vec();
                let (m, k, n) = (s_a[0], s_a[1], s_b[1]);
                {
                    let bdat = self.nodes[b].out.data.clone();
                    matmul_nt_acc(&grad, &bdat, m, n, k, &mut self.nodes[a].grad);
                }
                {
                    let adat = self.nodes[a].out.data.clone();
                    matmul_tn_acc(&adat, &grad, m, k, n, &mut self.nodes[b].grad);
                }
            }
            Expr::MatMulNt { a, b } => {
                let s_a = self.shape(a).to_vec();
                let s_b = self.shape(b).to_vec();
                let (m, k, n) = (s_a[0], s_a[1], s_b[0]);
                {
                    let bdat = self.nodes[b].out.data.clone();
                    matmul_acc(&grad, &bdat, m, n, k, &mut self.nodes[a].grad);
                }
                {
                    let adat = self.nodes[a].out.data.clone();
                    matmul_tn_acc(&grad, &adat, m, n, k, &mut self.nodes[b].grad);
                }
            }
            Expr::Add { a, b } => {
                acc(&mut self.nodes[a].grad, &grad);
                acc(&mut self.nodes[b].grad, &grad);
            }
            Expr::AddBias { a, b } => {
                acc(&mut self.nodes[a].grad, &grad);
                let n = self.shape(b)[0];
                let r = grad.len() / n;
                for i in 0..r {
                    for (gb, gv) in self.nodes[b].grad.iter_mut().zip(&grad[i * n..(i + 1) * n]) {
                        *gb += gv;
                    }
                }
            }
            Expr::Mul { a, b } => {
                {
                    let bdat = self.nodes[b].out.data.clone();
                    for ((ga, gv), bv) in self.nodes[a].grad.iter_mut().zip(&grad).zip(&bdat) {
                        *ga += gv * bv;
                    }
                }
                {
                    let adat = self.nodes[a].out.data.clone();
                    for ((gb, gv), av) in self.nodes[b].grad.iter_mut().zip(&grad).zip(&adat) {
                        *gb += gv * av;
                    }
                }
            }
            Expr::MulColMask { a, mask } => {
                let n = mask.len();
                let r = grad.len() / n;
                for i in 0..r {
                    for ((ga, gv), mv) in self.nodes[a].grad[i * n..(i + 1) * n]
                        .iter_mut()
                        .zip(&grad[i * n..(i + 1) * n])
                        .zip(&mask)
                    {
                        *ga += gv * mv;
                    }
                }
            }
            Expr::Scale { a, c } => {
                for (ga, gv) in self.nodes[a].grad.iter_mut().zip(&grad) {
                    *ga += c * gv;
                }
            }
            Expr::Neg { a } => {
                for (ga, gv) in self.nodes[a].grad.iter_mut().zip(&grad) {
                    *ga -= gv;
                }
            }
            Expr::Log { a } => {
                let x = self.nodes[a].out.data.clone();
                for ((ga, gv), xv) in self.nodes[a].grad.iter_mut().zip(&grad).zip(&x) {
                    *ga += gv / xv;
                }
            }
            Expr::Silu { a } => {
                let x = self.nodes[a].out.data.clone();
                for ((ga, gv), &xv) in self.nodes[a].grad.iter_mut().zip(&grad).zip(&x) {
                    let s = sigmoid(xv);
                    *ga += gv * (s * (1.0 + xv * (1.0 - s)));
                }
            }
            Expr::Sum { a } => {
                let g = grad[0];
                for ga in self.nodes[a].grad.iter_mut() {
                    *ga += g;
                }
            }
            Expr::RowSoftmax { a } => {
                let s = &self.nodes[id].out;
                let n = s.shape()[1];
                let r = s.shape()[0];
                let sdat = s.data.clone();
                for i in 0..r {
                    let srow = &sdat[i * n..(i + 1) * n];
                    let grow = &grad[i * n..(i + 1) * n];
                    let dot: f64 = srow.iter().zip(grow).map(|(sv, gv)| sv * gv).sum();
                    for ((ga, sv), gv) in self.nodes[a].grad[i * n..(i + 1) * n]
                        .iter_mut()
                        .zip(srow)
                        .zip(grow)
                    {
                        *ga += sv * (gv - dot);
                    }
                }
            }
            Expr::CausalSoftmax { a } => {
                let s = &self.nodes[id].out;
                let n = s.shape()[1];
                let sdat = s.data.clone();
                for t in 0..n {
                    let srow = &sdat[t * n..t * n + t + 1];
                    let grow = &grad[t * n..t * n + t + 1];
                    let dot: f64 = srow.iter().zip(grow).map(|(sv, gv)| sv * gv).sum();
                    for ((ga, sv), gv) in self.nodes[a].grad[t * n..t * n + t + 1]
                        .iter_mut()
                        .zip(srow)
                        .zip(grow)
                    {
                        *ga += sv * (gv - dot);
                    }
                }
            }
            Expr::RowLogSoftmax { a } => {
                let y = self.nodes[id].out.data.clone();
                let n = self.nodes[id].out.shape()[1];
                let r = self.nodes[id].out.shape()[0];
                for i in 0..r {
                    let yrow = &y[i * n..(i + 1) * n];
                    let grow = &grad[i * n..(i + 1) * n];
                    let gsum: f64 = grow.iter().sum();
                    for ((ga, yv), gv) in self.nodes[a].grad[i * n..(i + 1) * n]
                        .iter_mut()
                        .zip(yrow)
                        .zip(grow)
                    {
                        *ga += gv - yv.exp() * gsum;
                    }
                }
            }
            Expr::RmsNorm { x, gain, eps } => {
                let xdat = self.nodes[x].out.data.clone();
                let g = self.nodes[gain].out.data.clone();
                let d = g.len();
                let r = xdat.len() / d;
                for i in 0..r {
                    let xrow = &xdat[i * d..(i + 1) * d];
                    let grow = &grad[i * d..(i + 1) * d];
                    let ms = xrow.iter().map(|v| v * v).sum::<f64>() / d as f64;
                    let inv = 1.0 / (ms + eps).sqrt();
                    // gain gradient: dL/dg_j += G_ij · x_ij · inv
                    for j in 0..d {
                        self.nodes[gain].grad[j] += grow[j] * xrow[j] * inv;
                    }
                    // input gradient: inv·(Gg_j − u_j·Σ(Gg·u)/d), u = x·inv
                    let mut dot = 0.0;
                    for j in 0..d {
                        dot += grow[j] * g[j] * xrow[j] * inv;
                    }
                    for j in 0..d {
                        let u = xrow[j] * inv;
                        self.nodes[x].grad[i * d + j] += inv * (grow[j] * g[j] - u * dot / d as f64);
                    }
                }
            }
            Expr::Embedding { table, ids } => {
                let d = self.shape(table)[1];
                for (t, &row) in ids.iter().enumerate() {
                    for (gt, gv) in self.nodes[table].grad[row * d..(row + 1) * d]
                        .iter_mut()
                        .zip(&grad[t * d..(t + 1) * d])
                    {
                        *gt += gv;
                    }
                }
            }
            Expr::SliceCols { a, start, len } => {
                let n = self.shape(a)[1];
                let r = self.shape(a)[0];
                for i in 0..r {
                    for (ga, gv) in self.nodes[a].grad[i * n + start..i * n + start + len]
                        .iter_mut()
                        .zip(&grad[i * len..(i + 1) * len])
                    {
                        *ga += gv;
                    }
                }
            }
            Expr::ConcatCols { parts } => {
                let r = self.shape(id)[0];
                let total = self.shape(id)[1];
                let mut offset = 0;
                for &p in &parts {
                    let np = self.shape(p)[1];
                    for i in 0..r {
                        for (gp, gv) in self.nodes[p].grad[i * np..(i + 1) * np]
                            .iter_mut()
                            .zip(&grad[i * total + offset..i * total + offset + np])
                        {
                            *gp += gv;
                        }
                    }
                    offset += np;
                }
            }
            Expr::MaskedMean { a, mask } => {
                let z = mask.iter().filter(|m| **m).count() as f64;
                let g = grad[0] / z;
                for (ga, m) in self.nodes[a].grad.iter_mut().zip(&mask) {
                    if *m {
                        *ga += g;
                    }
                }
            }
            Expr::TakePerRow { a, idx } => {
                let n = self.shape(a)[1];
                for (i, &j) in idx.iter().enumerate() {
                    self.nodes[a].grad[i * n + j] += grad[i];
                }
            }
            Expr::Rope { a, d_head, base } => {
                let w = self.shape(a)[1];
                let t = self.shape(a)[0];
                let mut g = grad.clone();
                rope_apply(&mut g, t, w, d_head, base, true);
                acc(&mut self.nodes[a].grad, &g);
            }
        }
        self.nodes[id].grad = grad;
    }
}

fn acc(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Rotate head-dim pairs by ±(pos · base^(-2j/d_head)). `inverse` rotates
/// by the negative angle, which is the exact adjoint.
fn rope_apply(data: &mut [f64], t: usize, w: usize, d_head: usize, base: f64, inverse: bool) {
    let half = d_head / 2;
    let heads = w / d_head;
    for pos in 0..t {
        for h in 0..heads {
            let off = pos * w + h * d_head;
            for j in 0..half {
                let theta = pos as f64 * base.powf(-2.0 * j as f64 / d_head as f64);
                let (sin, cos) = theta.sin_cos();
                let sin = if inverse { -sin } else { sin };
                let x0 = data[off + 2 * j];
                let x1 = data[off + 2 * j + 1];
                data[off + 2 * j] = x0 * cos - x1 * sin;
                data[off + 2 * j + 1] = x0 * sin + x1 * cos;
            }
        }
    }
}
