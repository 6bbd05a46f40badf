//! Dense fp64 tensors and a reverse-mode autodiff tape.
//!
//! All arithmetic in this crate flows through [`Tape`]: a forward pass
//! records one [`Node`] per primitive, `backward` replays the tape in
//! reverse and accumulates exact gradients into per-node slots. Graphs
//! are built per forward call and dropped afterwards, which keeps the
//! design correct under iterative pruning where masks change between
//! passes.
//!
//! Every primitive checks its output for NaN/Inf and reports shape
//! mismatches naming both shapes.

mod check;
mod ops;

pub use check::{finite_difference_check, primitive_gradcheck};

use std::collections::BTreeMap;

use thiserror::Error;

/// Identifier of a node on a [`Tape`].
pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for size {size}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("backward: loss must be scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("tensor: shape {shape:?} implies {expected} elements, data has {got}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major fp64 array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.len() <= 1
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Primitive kinds understood by the tape.
///
/// `Op::all()` is the catalog: every variant listed there has a forward
/// entry point on [`Tape`] and a registered backward rule; the gradient
/// property suite iterates this list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Op {
    MatMul,
    MatMulNt,
    Add,
    AddBias,
    Mul,
    MulColMask,
    Scale,
    Neg,
    Log,
    Silu,
    Sum,
    RowSoftmax,
    CausalSoftmax,
    RowLogSoftmax,
    RmsNorm,
    Embedding,
    SliceCols,
    ConcatCols,
    MaskedMean,
    TakePerRow,
    Rope,
}

impl Op {
    /// The full catalog of differentiable primitives.
    pub fn all() -> &'static [Op] {
        use Op::*;
        &[
            MatMul,
            MatMulNt,
            Add,
            AddBias,
            Mul,
            MulColMask,
            Scale,
            Neg,
            Log,
            Silu,
            Sum,
            RowSoftmax,
            CausalSoftmax,
            RowLogSoftmax,
            RmsNorm,
            Embedding,
            SliceCols,
            ConcatCols,
            MaskedMean,
            TakePerRow,
            Rope,
        ]
    }
}

/// How a node was produced, with parent references.
#[derive(Debug, Clone)]
enum Expr {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    MatMulNt { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    AddBias { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    MulColMask { a: NodeId, mask: Vec<f64> },
    Scale { a: NodeId, c: f64 },
    Neg { a: NodeId },
    Log { a: NodeId },
    Silu { a: NodeId },
    Sum { a: NodeId },
    RowSoftmax { a: NodeId },
    CausalSoftmax { a: NodeId },
    RowLogSoftmax { a: NodeId },
    RmsNorm { x: NodeId, gain: NodeId, eps: f64 },
    Embedding { table: NodeId, ids: Vec<usize> },
    SliceCols { a: NodeId, start: usize, len: usize },
    ConcatCols { parts: Vec<NodeId> },
    MaskedMean { a: NodeId, mask: Vec<bool> },
    TakePerRow { a: NodeId, idx: Vec<usize> },
    Rope { a: NodeId, d_head: usize, base: f64 },
}

/// One recorded operation: op tag, parents, cached output, gradient slot.
#[derive(Debug)]
pub struct Node {
    expr: Expr,
    out: Tensor,
    grad: Vec<f64>,
    requires_grad: bool,
}

impl Node {
    pub fn output(&self) -> &Tensor {
        &self.out
    }
}

/// Dynamic Wengert tape. Nodes are appended in forward order, so reverse
/// index order is a reverse topological order and backward visits each
/// node exactly once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input tensor. Only leaves with `requires_grad` appear
    /// in the result of [`Tape::gradients`].
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> NodeId {
        self.push(Expr::Leaf, t, requires_grad)
    }

    fn push(&mut self, expr: Expr, out: Tensor, requires_grad: bool) -> NodeId {
        let grad = vec![0.0; out.len()];
        self.nodes.push(Node {
            expr,
            out,
            grad,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn push_checked(&mut self, op: &'static str, expr: Expr, out: Tensor) -> Result<NodeId> {
        if !out.all_finite() {
            return Err(TensorError::NonFinite { op });
        }
        Ok(self.push(expr, out, false))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].out
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id].out.shape()
    }

    /// Gradient slot of a node (zeros until `backward` has run).
    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].grad
    }

    /// Reverse-mode sweep from a scalar loss. Gradient slots are zeroed
    /// first, so repeated calls yield identical (not doubled) results.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.nodes[loss].out.is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss].out.shape().to_vec(),
            });
        }
        for node in &mut self.nodes {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.nodes[loss].grad[0] = 1.0;
        for id in (0..=loss).rev() {
            self.step_backward(id);
        }
        Ok(())
    }

    /// Gradients of a scalar loss with respect to every `requires_grad`
    /// leaf, keyed by leaf id.
    pub fn gradients(&mut self, loss: NodeId) -> Result<BTreeMap<NodeId, Tensor>> {
        self.backward(loss)?;
        let mut out = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.expr, Expr::Leaf) {
                let t = Tensor::new(node.out.shape().to_vec(), node.grad.clone())
                    .expect("grad slot matches output shape");
                out.insert(id, t);
            }
        }
        Ok(out)
    }
}

// ── raw fp64 kernels ─────────────────────────────────────────────────

/// C += A[m,k] · B[k,n], row-major. Accumulation order over `p` is fixed,
/// and zero lhs entries are skipped (x + 0·b is exact), which makes
/// masked forwards cheap without changing values.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// C += A[m,k] · B[n,k]ᵀ  →  [m,n].
pub(crate) fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            *cv += s;
        }
    }
}

/// C += A[m,k]ᵀ · G[m,n]  →  [k,n].
pub(crate) fn matmul_tn_acc(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv += aip * gv;
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests;
