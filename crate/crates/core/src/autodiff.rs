//! Minimal reverse-mode automatic differentiation over dense f64 arrays.
//!
//! A [`Tape`] records every operation of one forward pass into a
//! computation record; [`Tape::backward`] replays the record in exact
//! reverse order and accumulates gradients. Tapes are single-threaded and
//! short-lived: build one per forward pass, run backward, drop it.
//! Distinct tapes share nothing and may live on distinct threads.
//!
//! Everything is 64-bit. Broadcasting is deliberately restricted to
//! scalars and trailing dimensions (`[n, d] op [d]`).

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

pub type NodeId = usize;
pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("empty attention scope: mask row {row} has no visible column")]
    EmptyAttentionScope { row: usize },
    #[error("row index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("operands belong to different tapes")]
    TapeMismatch,
    #[error("{0}")]
    Invalid(String),
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Numerically stable logistic function.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// A named-by-identity parameter array that outlives any single tape.
///
/// The `id` ties gradients harvested from a tape back to the array the
/// optimizer should update.
#[derive(Debug, Clone)]
pub struct Param {
    pub id: u64,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Param {
        assert_eq!(
            numel(&shape),
            data.len(),
            "param data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Param {
            id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Param {
        let n = numel(&shape);
        Param::new(shape, vec![0.0; n])
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

// ---------------------------------------------------------------------------
// Attention masks
// ---------------------------------------------------------------------------

/// Binary visibility matrix consumed by [`Tensor::masked_softmax`].
/// `true` marks a key the query row may attend to.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnMask {
    pub rows: usize,
    pub cols: usize,
    visible: Vec<bool>,
}

impl AttnMask {
    pub fn build(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> AttnMask {
        let mut visible = vec![false; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                visible[i * cols + j] = f(i, j);
            }
        }
        AttnMask { rows, cols, visible }
    }

    pub fn all_visible(rows: usize, cols: usize) -> AttnMask {
        AttnMask {
            rows,
            cols,
            visible: vec![true; rows * cols],
        }
    }

    #[inline]
    pub fn is_visible(&self, i: usize, j: usize) -> bool {
        self.visible[i * self.cols + j]
    }

    pub fn visible_in_row(&self, i: usize) -> usize {
        self.visible[i * self.cols..(i + 1) * self.cols]
            .iter()
            .filter(|v| **v)
            .count()
    }

    /// The mask as a dense 0/1 matrix, row-major.
    pub fn to_dense(&self) -> Vec<f64> {
        self.visible.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()
    }
}

// ---------------------------------------------------------------------------
// Recorded operations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinSKind {
    Add,
    Mul,
    Min,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnKind {
    Neg,
    Exp,
    Log,
    Sigmoid,
    Relu,
    Sqrt,
    Abs,
}

#[derive(Debug)]
enum Op {
    Binary { kind: BinKind, a: NodeId, b: NodeId, out: NodeId },
    BinaryScalar { kind: BinSKind, a: NodeId, s: f64, out: NodeId },
    Unary { kind: UnKind, a: NodeId, out: NodeId },
    Matmul { a: NodeId, b: NodeId, out: NodeId, m: usize, k: usize, n: usize },
    Transpose { a: NodeId, out: NodeId, rows: usize, cols: usize },
    Reshape { a: NodeId, out: NodeId },
    ConcatRows { parts: Vec<NodeId>, out: NodeId, cols: usize },
    ConcatCols { parts: Vec<NodeId>, out: NodeId, rows: usize },
    SliceCols { a: NodeId, out: NodeId, rows: usize, cols: usize, start: usize, len: usize },
    GatherRows { a: NodeId, out: NodeId, idx: Rc<Vec<usize>>, cols: usize },
    SumAll { a: NodeId, out: NodeId },
    MeanAll { a: NodeId, out: NodeId },
    MaxLast { a: NodeId, out: NodeId, argmax: Vec<usize> },
    SoftmaxRows { a: NodeId, out: NodeId, rows: usize, cols: usize },
    MaskedSoftmax { a: NodeId, out: NodeId, mask: Rc<AttnMask> },
    LayerNorm {
        a: NodeId,
        gamma: NodeId,
        beta: NodeId,
        out: NodeId,
        rows: usize,
        cols: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
}

struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
}

struct Graph {
    nodes: Vec<Node>,
    ops: Vec<Op>,
    param_nodes: HashMap<u64, NodeId>,
    grad_enabled: bool,
}

// ---------------------------------------------------------------------------
// Tape and tensors
// ---------------------------------------------------------------------------

/// One computation record. Cloning the handle shares the record.
#[derive(Clone)]
pub struct Tape {
    g: Rc<RefCell<Graph>>,
}

/// Handle to a value stored on a tape.
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    pub id: NodeId,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            g: Rc::new(RefCell::new(Graph {
                nodes: Vec::new(),
                ops: Vec::new(),
                param_nodes: HashMap::new(),
                grad_enabled: true,
            })),
        }
    }

    /// A tape that stores values but records no backward rules. Used for
    /// evaluation-only forward passes.
    pub fn no_grad() -> Tape {
        let t = Tape::new();
        t.g.borrow_mut().grad_enabled = false;
        t
    }

    pub fn grad_enabled(&self) -> bool {
        self.g.borrow().grad_enabled
    }

    fn push_node(&self, value: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(numel(&shape), value.len());
        let mut g = self.g.borrow_mut();
        let rg = requires_grad && g.grad_enabled;
        g.nodes.push(Node { value, shape, requires_grad: rg });
        Tensor {
            tape: self.clone(),
            id: g.nodes.len() - 1,
        }
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, data: Vec<f64>, shape: Vec<usize>) -> Tensor {
        self.push_node(data, shape, false)
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.constant(vec![v], vec![1])
    }

    /// A differentiable leaf.
    pub fn var(&self, data: Vec<f64>, shape: Vec<usize>) -> Tensor {
        self.push_node(data, shape, true)
    }

    /// Lease a parameter onto the tape. Repeated leases of the same
    /// parameter return the same node so its gradient accumulates.
    pub fn param(&self, p: &Param) -> Tensor {
        if let Some(&id) = self.g.borrow().param_nodes.get(&p.id) {
            return Tensor { tape: self.clone(), id };
        }
        let t = self.push_node(p.data.clone(), p.shape.clone(), true);
        self.g.borrow_mut().param_nodes.insert(p.id, t.id);
        t
    }

    pub fn num_nodes(&self) -> usize {
        self.g.borrow().nodes.len()
    }

    pub fn num_ops(&self) -> usize {
        self.g.borrow().ops.len()
    }

    fn record(&self, op: Op) {
        self.g.borrow_mut().ops.push(op);
    }

    /// Reverse sweep from a scalar root. Returns the gradient buffers;
    /// the tape itself is left untouched and can be dropped afterwards.
    pub fn backward(&self, root: &Tensor) -> Result<Gradients> {
        if !Rc::ptr_eq(&self.g, &root.tape.g) {
            return Err(TensorError::TapeMismatch);
        }
        let g = self.g.borrow();
        let root_node = &g.nodes[root.id];
        if root_node.value.len() != 1 {
            return Err(TensorError::Invalid(format!(
                "backward root must be a scalar, got shape {:?}",
                root_node.shape
            )));
        }
        if !root_node.requires_grad {
            return Err(TensorError::Invalid(
                "backward root does not require grad".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..g.nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(vec![1.0]);

        for op in g.ops.iter().rev() {
            backward_op(op, &g.nodes, &mut grads);
        }

        Ok(Gradients {
            by_node: grads,
            param_nodes: g.param_nodes.clone(),
        })
    }
}

/// Gradient buffers produced by one backward sweep.
pub struct Gradients {
    by_node: Vec<Option<Vec<f64>>>,
    param_nodes: HashMap<u64, NodeId>,
}

impl Gradients {
    pub fn wrt(&self, t: &Tensor) -> Option<&[f64]> {
        self.by_node[t.id].as_deref()
    }

    /// Gradient for a leased parameter, by param id. `None` when the
    /// parameter did not participate in the recorded computation.
    pub fn of_param(&self, param_id: u64) -> Option<&[f64]> {
        self.param_nodes
            .get(&param_id)
            .and_then(|&n| self.by_node[n].as_deref())
    }
}

// ---------------------------------------------------------------------------
// Forward implementations
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    Trailing,
    Scalar,
}

fn broadcast_kind(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Broadcast> {
    if lhs == rhs {
        return Ok(Broadcast::Same);
    }
    if numel(rhs) == 1 {
        return Ok(Broadcast::Scalar);
    }
    if rhs.len() < lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs {
        return Ok(Broadcast::Trailing);
    }
    Err(TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() == m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        }
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tensor {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.g.borrow().nodes[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.g.borrow().nodes[self.id].value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.g.borrow().nodes[self.id].requires_grad
    }

    /// Copy of the stored value, row-major.
    pub fn value(&self) -> Vec<f64> {
        self.tape.g.borrow().nodes[self.id].value.clone()
    }

    /// The value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let g = self.tape.g.borrow();
        let n = &g.nodes[self.id];
        assert!(n.value.len() == 1, "item() on tensor of shape {:?}", n.shape);
        n.value[0]
    }

    fn same_tape(&self, other: &Tensor) -> Result<()> {
        if Rc::ptr_eq(&self.tape.g, &other.tape.g) {
            Ok(())
        } else {
            Err(TensorError::TapeMismatch)
        }
    }

    fn binary(&self, other: &Tensor, kind: BinKind, name: &'static str) -> Result<Tensor> {
        self.same_tape(other)?;
        let (value, shape, rg) = {
            let g = self.tape.g.borrow();
            let a = &g.nodes[self.id];
            let b = &g.nodes[other.id];
            let bc = broadcast_kind(name, &a.shape, &b.shape)?;
            if kind == BinKind::Div {
                if let Some(pos) = b.value.iter().position(|&x| x == 0.0) {
                    return Err(TensorError::Domain {
                        op: "div",
                        detail: format!("divisor contains zero at flat index {pos}"),
                    });
                }
            }
            let bl = b.value.len();
            let mut out = vec![0.0; a.value.len()];
            let f = |x: f64, y: f64| -> f64 {
                match kind {
                    BinKind::Add => x + y,
                    BinKind::Sub => x - y,
                    BinKind::Mul => x * y,
                    BinKind::Div => x / y,
                    BinKind::Min => {
                        if y < x {
                            y
                        } else {
                            x
                        }
                    }
                    BinKind::Max => {
                        if y > x {
                            y
                        } else {
                            x
                        }
                    }
                }
            };
            match bc {
                Broadcast::Same => {
                    for (i, o) in out.iter_mut().enumerate() {
                        *o = f(a.value[i], b.value[i]);
                    }
                }
                Broadcast::Scalar => {
                    let y = b.value[0];
                    for (i, o) in out.iter_mut().enumerate() {
                        *o = f(a.value[i], y);
                    }
                }
                Broadcast::Trailing => {
                    for (i, o) in out.iter_mut().enumerate() {
                        *o = f(a.value[i], b.value[i % bl]);
                    }
                }
            }
            (out, a.shape.clone(), a.requires_grad || b.requires_grad)
        };
        let t = self.tape.push_node(value, shape, rg);
        if t.requires_grad() {
            self.tape.record(Op::Binary {
                kind,
                a: self.id,
                b: other.id,
                out: t.id,
            });
        }
        Ok(t)
    }

    fn binary_scalar(&self, s: f64, kind: BinSKind) -> Tensor {
        let (value, shape, rg) = {
            let g = self.tape.g.borrow();
            let a = &g.nodes[self.id];
            let out = a
                .value
                .iter()
                .map(|&x| match kind {
                    BinSKind::Add => x + s,
                    BinSKind::Mul => x * s,
                    BinSKind::Min => x.min(s),
                    BinSKind::Max => x.max(s),
                })
                .collect();
            (out, a.shape.clone(), a.requires_grad)
        };
        let t = self.tape.push_node(value, shape, rg);
        if t.requires_grad() {
            self.tape.record(Op::BinaryScalar {
                kind,
                a: self.id,
                s,
                out: t.id,
            });
        }
        t
    }

    fn unary(&self, kind: UnKind, name: &'static str) -> Result<Tensor> {
        let (value, shape, rg) = {
            let g = self.tape.g.borrow();
            let a = &g.nodes[self.id];
            match kind {
                UnKind::Log => {
                    if let Some(pos) = a.value.iter().position(|&x| x <= 0.0) {
                        return Err(TensorError::Domain {
                            op: name,
                            detail: format!(
                                "non-positive operand {} at flat index {pos}",
                                a.value[pos]
                            ),
                        });
                    }
                }
                UnKind::Sqrt => {
                    if let Some(pos) = a.value.iter().position(|&x| x < 0.0) {
                        return Err(TensorError::Domain {
                            op: name,
                            detail: format!(
                                "negative operand {} at flat index {pos}",
                                a.value[pos]
                            ),
                        });
                    }
                }
                _ => {}
            }
            let out = a
                .value
                .iter()
                .map(|&x| match kind {
                    UnKind::Neg => -x,
                    UnKind::Exp => x.exp(),
                    UnKind::Log => x.ln(),
                    UnKind::Sigmoid => sigmoid_scalar(x),
                    UnKind::Relu => x.max(0.0),
                    UnKind::Sqrt => x.sqrt(),
                    UnKind::Abs => x.abs(),
                })
                .collect();
            (out, a.shape.clone(), a.requires_grad)
        };
        let t = self.tape.push_node(value, shape, rg);
        if t.requires_grad() {
            self.tape.record(Op::Unary {
                kind,
                a: self.id,
                out: t.id,
            });
        }
        Ok(t)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinKind::Add, "add")
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinKind::Sub, "sub")
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinKind::Mul, "mul")
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinKind::Div, "div")
    }

    /// Elementwise minimum; ties keep the left operand's gradient.
    pub fn emin(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinKind::Min, "emin")
    }

    /// Elementwise maximum; ties keep the left operand's gradient.
    pub fn emax(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinKind::Max, "emax")
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        self.binary_scalar(s, BinSKind::Add)
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor {
        self.binary_scalar(s, BinSKind::Mul)
    }

    pub fn clamp_min(&self, s: f64) -> Tensor {
        self.binary_scalar(s, BinSKind::Max)
    }

    pub fn clamp_max(&self, s: f64) -> Tensor {
        self.binary_scalar(s, BinSKind::Min)
    }

    pub fn neg(&self) -> Tensor {
        self.unary(UnKind::Neg, "neg").expect("neg is total")
    }

    pub fn exp(&self) -> Tensor {
        self.unary(UnKind::Exp, "exp").expect("exp is total")
    }

    pub fn log(&self) -> Result<Tensor> {
        self.unary(UnKind::Log, "log")
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(UnKind::Sigmoid, "sigmoid").expect("sigmoid is total")
    }

    pub fn relu(&self) -> Tensor {
        self.unary(UnKind::Relu, "relu").expect("relu is total")
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        self.unary(UnKind::Sqrt, "sqrt")
    }

    pub fn abs(&self) -> Tensor {
        self.unary(UnKind::Abs, "abs").expect("abs is total")
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(TensorError::Invalid(format!(
                "{op} expects a 2-d tensor, got shape {shape:?}"
            )));
        }
        Ok((shape[0], shape[1]))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_tape(other)?;
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let (value, rg) = {
            let g = self.tape.g.borrow();
            let a = &g.nodes[self.id];
            let b = &g.nodes[other.id];
            let mut c = vec![0.0; m * n];
            dgemm(m, k, n, &a.value, k as isize, 1, &b.value, n as isize, 1, 0.0, &mut c);
            (c, a.requires_grad || b.requires_grad)
        };
        let t = self.tape.push_node(value, vec![m, n], rg);
        if t.requires_grad() {
            self.tape.record(Op::Matmul {
                a: self.id,
                b: other.id,
                out: t.id,
                m,
                k,
                n,
            });
        }
        Ok(t)
    }

    /// Materialized 2-d transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        let (rows, cols) = self.dims2("transpose")?;
        let (value, rg) = {
            let g = self.tape.g.borrow();
            let a = &g.nodes[self.id];
            let mut out = vec![0.0; rows * cols];
            for i in 0..rows {
                for j in 0..cols {
                    out[j * rows + i] = a.value[i * cols + j];
                }
            }
            (out, a.requires_grad)
        };
        let t = self.tape.push_node(value, vec![cols, rows], rg);
        if t.requires_grad() {
            self.tape.record(Op::Transpose {
                a: self.id,
                out: t.id,
                rows,
                cols,
            });
        }
        Ok(t)
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let (value, rg) = {
            let g = self.tape.g.borrow();
            let a = &g.nodes[self.id];
            if numel(&shape) != a.value.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "reshape",
                    lhs: a.shape.clone(),
                    rhs: shape,
                });
            }
            (a.value.clone(), a.requires_grad)
        };
        let t = self.tape.push_node(value, shape, rg);
        if t.requires_grad() {
            self.tape.record(Op::Reshape { a: self.id, out: t.id });
        }
        Ok(t)
    }

    /// Column block `[rows, start..start+len]` of a 2-d tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (rows, cols) = self.dims2("slice_cols")?;
        if start + len > cols {
            return Err(TensorError::Invalid(format!(
                "slice_cols range {start}..{} out of bounds for {cols} columns",
                start + len
            )));
        }
        let (value, rg) = {
            let g = self.tape.g.borrow();
            let a = &g.nodes[self.id];
            let mut out = Vec::with_capacity(rows * len);
            for i in 0..rows {
                out.extend_from_slice(&a.value[i * cols + start..i * cols + start + len]);
            }
            (out, a.requires_grad)
        };
        let t = self.tape.push_node(value, vec![rows, len], rg);
        if t.requires_grad() {
            self.tape.record(Op::SliceCols {
                a: self.id,
                out: t.id,
                rows,
                cols,
                start,
                len,
            });
        }
        Ok(t)
    }

    /// `out[i] = self[idx[i]]`; backward scatter-adds through `idx`.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let (rows, cols) = self.dims2("gather_rows")?;
        for &i in idx {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange { index: i, len: rows });
            }
        }
        let (value, rg) = {
            let g = self.tape.g.borrow();
            let a = &g.nodes[self.id];
            let mut out = Vec::with_capacity(idx.len() * cols);
            for &i in idx {
                out.extend_from_slice(&a.value[i * cols..(i + 1) * cols]);
            }
            (out, a.requires_grad)
        };
        let t = self.tape.push_node(value, vec![idx.len(), cols], rg);
        if t.requires_grad() {
            self.tape.record(Op::GatherRows {
                a: self.id,
                out: t.id,
                idx: Rc::new(idx.to_vec()),
                cols,
            });
        }
        Ok(t)
    }

    pub fn sum_all(&self) -> Tensor {
        let (v, rg) = {
            let g = self.tape.g.borrow();
            let a = &g.nodes[self.id];
            (a.value.iter().sum::<f64>(), a.requires_grad)
        };
        let t = self.tape.push_node(vec![v], vec![1], rg);
        if t.requires_grad() {
            self.tape.record(Op::SumAll { a: self.id, out: t.id });
        }
        t
    }

    pub fn mean_all(&self) -> Tensor {
        let (v, rg) = {
            let g = self.tape.g.borrow();
            let a = &g.nodes[self.id];
            let n = a.value.len().max(1) as f64;
            (a.value.iter().sum::<f64>() / n, a.requires_grad)
        };
        let t = self.tape.push_node(vec![v], vec![1], rg);
        if t.requires_grad() {
            self.tape.record(Op::MeanAll { a: self.id, out: t.id });
        }
        t
    }

    /// Maximum over the last axis of a 2-d tensor; ties pick the first
    /// occurrence.
    pub fn max_last(&self) -> Result<Tensor> {
        let (rows, cols) = self.dims2("max_last")?;
        if cols == 0 {
            return Err(TensorError::Invalid("max_last over zero columns".into()));
        }
        let (value, argmax, rg) = {
            let g = self.tape.g.borrow();
            let a = &g.nodes[self.id];
            let mut value = Vec::with_capacity(rows);
            let mut argmax = Vec::with_capacity(rows);
            for i in 0..rows {
                let row = &a.value[i * cols..(i + 1) * cols];
                let mut best = 0usize;
                for j in 1..cols {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                value.push(row[best]);
                argmax.push(best);
            }
            (value, argmax, a.requires_grad)
        };
        let t = self.tape.push_node(value, vec![rows], rg);
        if t.requires_grad() {
            self.tape.record(Op::MaxLast {
                a: self.id,
                out: t.id,
                argmax,
            });
        }
        Ok(t)
    }

    /// Row softmax of a 2-d tensor, stabilized by row-max subtraction.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (rows, cols) = self.dims2("softmax_rows")?;
        if cols == 0 {
            return Err(TensorError::Invalid("softmax over zero columns".into()));
        }
        let (value, rg) = {
            let g = self.tape.g.borrow();
            let a = &g.nodes[self.id];
            let mut out = vec![0.0; rows * cols];
            for i in 0..rows {
                let row = &a.value[i * cols..(i + 1) * cols];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..cols {
                    let e = (row[j] - m).exp();
                    out[i * cols + j] = e;
                    sum += e;
                }
                for j in 0..cols {
                    out[i * cols + j] /= sum;
                }
            }
            (out, a.requires_grad)
        };
        let t = self.tape.push_node(value, vec![rows, cols], rg);
        if t.requires_grad() {
            self.tape.record(Op::SoftmaxRows {
                a: self.id,
                out: t.id,
                rows,
                cols,
            });
        }
        Ok(t)
    }

    /// Row softmax restricted to the mask's visible entries. Masked
    /// entries are exactly zero in the output; each row is stabilized by
    /// subtracting its maximum over visible entries only.
    ///
    /// A fully masked row is an error ("empty attention scope").
    pub fn masked_softmax(&self, mask: &Rc<AttnMask>) -> Result<Tensor> {
        let (rows, cols) = self.dims2("masked_softmax")?;
        if rows != mask.rows || cols != mask.cols {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax",
                lhs: vec![rows, cols],
                rhs: vec![mask.rows, mask.cols],
            });
        }
        let (value, rg) = {
            let g = self.tape.g.borrow();
            let a = &g.nodes[self.id];
            let mut out = vec![0.0; rows * cols];
            for i in 0..rows {
                let row = &a.value[i * cols..(i + 1) * cols];
                let mut m = f64::NEG_INFINITY;
                for j in 0..cols {
                    if mask.is_visible(i, j) && row[j] > m {
                        m = row[j];
                    }
                }
                if m == f64::NEG_INFINITY {
                    return Err(TensorError::EmptyAttentionScope { row: i });
                }
                let mut sum = 0.0;
                for j in 0..cols {
                    if mask.is_visible(i, j) {
                        let e = (row[j] - m).exp();
                        out[i * cols + j] = e;
                        sum += e;
                    }
                }
                for j in 0..cols {
                    if mask.is_visible(i, j) {
                        out[i * cols + j] /= sum;
                    }
                }
            }
            (out, a.requires_grad)
        };
        let t = self.tape.push_node(value, vec![rows, cols], rg);
        if t.requires_grad() {
            self.tape.record(Op::MaskedSoftmax {
                a: self.id,
                out: t.id,
                mask: Rc::clone(mask),
            });
        }
        Ok(t)
    }

    /// Row-wise layer normalization of a 2-d tensor with learnable scale
    /// and shift of length `cols`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        self.same_tape(gamma)?;
        self.same_tape(beta)?;
        let (rows, cols) = self.dims2("layer_norm")?;
        if gamma.numel() != cols || beta.numel() != cols {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: vec![rows, cols],
                rhs: gamma.shape(),
            });
        }
        let (value, mean, rstd, rg) = {
            let g = self.tape.g.borrow();
            let a = &g.nodes[self.id];
            let ga = &g.nodes[gamma.id];
            let be = &g.nodes[beta.id];
            let mut out = vec![0.0; rows * cols];
            let mut mean = vec![0.0; rows];
            let mut rstd = vec![0.0; rows];
            for i in 0..rows {
                let row = &a.value[i * cols..(i + 1) * cols];
                let mu = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / cols as f64;
                let rs = 1.0 / (var + eps).sqrt();
                mean[i] = mu;
                rstd[i] = rs;
                for j in 0..cols {
                    let xh = (row[j] - mu) * rs;
                    out[i * cols + j] = xh * ga.value[j] + be.value[j];
                }
            }
            let rg = a.requires_grad || ga.requires_grad || be.requires_grad;
            (out, mean, rstd, rg)
        };
        let t = self.tape.push_node(value, vec![rows, cols], rg);
        if t.requires_grad() {
            self.tape.record(Op::LayerNorm {
                a: self.id,
                gamma: gamma.id,
                beta: beta.id,
                out: t.id,
                rows,
                cols,
                mean,
                rstd,
            });
        }
        Ok(t)
    }
}

/// Stack 2-d tensors with equal column counts on top of each other.
pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    assert!(!parts.is_empty(), "concat_rows of nothing");
    let tape = parts[0].tape.clone();
    let mut cols = None;
    let mut total_rows = 0;
    for p in parts {
        parts[0].same_tape(p)?;
        let (r, c) = p.dims2("concat_rows")?;
        match cols {
            None => cols = Some(c),
            Some(c0) if c0 != c => {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![total_rows, c0],
                    rhs: vec![r, c],
                })
            }
            _ => {}
        }
        total_rows += r;
    }
    let cols = cols.unwrap();
    let (value, rg) = {
        let g = tape.g.borrow();
        let mut out = Vec::with_capacity(total_rows * cols);
        let mut rg = false;
        for p in parts {
            let n = &g.nodes[p.id];
            out.extend_from_slice(&n.value);
            rg |= n.requires_grad;
        }
        (out, rg)
    };
    let t = tape.push_node(value, vec![total_rows, cols], rg);
    if t.requires_grad() {
        tape.record(Op::ConcatRows {
            parts: parts.iter().map(|p| p.id).collect(),
            out: t.id,
            cols,
        });
    }
    Ok(t)
}

/// Stack 2-d tensors with equal row counts side by side.
pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    assert!(!parts.is_empty(), "concat_cols of nothing");
    let tape = parts[0].tape.clone();
    let mut rows = None;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        parts[0].same_tape(p)?;
        let (r, c) = p.dims2("concat_cols")?;
        match rows {
            None => rows = Some(r),
            Some(r0) if r0 != r => {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![r0, widths.iter().sum()],
                    rhs: vec![r, c],
                })
            }
            _ => {}
        }
        widths.push(c);
    }
    let rows = rows.unwrap();
    let total_cols: usize = widths.iter().sum();
    let (value, rg) = {
        let g = tape.g.borrow();
        let mut out = vec![0.0; rows * total_cols];
        let mut rg = false;
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let n = &g.nodes[p.id];
            for i in 0..rows {
                out[i * total_cols + off..i * total_cols + off + w]
                    .copy_from_slice(&n.value[i * w..(i + 1) * w]);
            }
            rg |= n.requires_grad;
            off += w;
        }
        (out, rg)
    };
    let t = tape.push_node(value, vec![rows, total_cols], rg);
    if t.requires_grad() {
        tape.record(Op::ConcatCols {
            parts: parts.iter().map(|p| p.id).collect(),
            out: t.id,
            rows,
        });
    }
    Ok(t)
}

// ---------------------------------------------------------------------------
// Backward rules
// ---------------------------------------------------------------------------

fn add_into(acc: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = acc.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

fn backward_op(op: &Op, nodes: &[Node], grads: &mut Vec<Option<Vec<f64>>>) {
    match op {
        Op::Binary { kind, a, b, out } => {
            let Some(g) = grads[*out].take() else { return };
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let bl = bv.len();
            let reduce = |gb: &mut [f64], i: usize, v: f64| {
                gb[i % bl] += v;
            };
            if nodes[*a].requires_grad {
                add_into(&mut grads[*a], av.len(), |ga| match kind {
                    BinKind::Add => {
                        for i in 0..ga.len() {
                            ga[i] += g[i];
                        }
                    }
                    BinKind::Sub => {
                        for i in 0..ga.len() {
                            ga[i] += g[i];
                        }
                    }
                    BinKind::Mul => {
                        for i in 0..ga.len() {
                            ga[i] += g[i] * bv[i % bl];
                        }
                    }
                    BinKind::Div => {
                        for i in 0..ga.len() {
                            ga[i] += g[i] / bv[i % bl];
                        }
                    }
                    BinKind::Min => {
                        for i in 0..ga.len() {
                            if av[i] <= bv[i % bl] {
                                ga[i] += g[i];
                            }
                        }
                    }
                    BinKind::Max => {
                        for i in 0..ga.len() {
                            if av[i] >= bv[i % bl] {
                                ga[i] += g[i];
                            }
                        }
                    }
                });
            }
            if nodes[*b].requires_grad {
                add_into(&mut grads[*b], bl, |gb| match kind {
                    BinKind::Add => {
                        for i in 0..av.len() {
                            reduce(gb, i, g[i]);
                        }
                    }
                    BinKind::Sub => {
                        for i in 0..av.len() {
                            reduce(gb, i, -g[i]);
                        }
                    }
                    BinKind::Mul => {
                        for i in 0..av.len() {
                            reduce(gb, i, g[i] * av[i]);
                        }
                    }
                    BinKind::Div => {
                        for i in 0..av.len() {
                            let bb = bv[i % bl];
                            reduce(gb, i, -g[i] * av[i] / (bb * bb));
                        }
                    }
                    BinKind::Min => {
                        for i in 0..av.len() {
                            if bv[i % bl] < av[i] {
                                reduce(gb, i, g[i]);
                            }
                        }
                    }
                    BinKind::Max => {
                        for i in 0..av.len() {
                            if bv[i % bl] > av[i] {
                                reduce(gb, i, g[i]);
                            }
                        }
                    }
                });
            }
            grads[*out] = Some(g);
        }
        Op::BinaryScalar { kind, a, s, out } => {
            let Some(g) = grads[*out].take() else { return };
            if nodes[*a].requires_grad {
                let av = &nodes[*a].value;
                add_into(&mut grads[*a], av.len(), |ga| match kind {
                    BinSKind::Add => {
                        for i in 0..ga.len() {
                            ga[i] += g[i];
                        }
                    }
                    BinSKind::Mul => {
                        for i in 0..ga.len() {
                            ga[i] += g[i] * s;
                        }
                    }
                    BinSKind::Min => {
                        for i in 0..ga.len() {
                            if av[i] <= *s {
                                ga[i] += g[i];
                            }
                        }
                    }
                    BinSKind::Max => {
                        for i in 0..ga.len() {
                            if av[i] >= *s {
                                ga[i] += g[i];
                            }
                        }
                    }
                });
            }
            grads[*out] = Some(g);
        }
        Op::Unary { kind, a, out } => {
            let Some(g) = grads[*out].take() else { return };
            if nodes[*a].requires_grad {
                let av = &nodes[*a].value;
                let ov = &nodes[*out].value;
                add_into(&mut grads[*a], av.len(), |ga| match kind {
                    UnKind::Neg => {
                        for i in 0..ga.len() {
                            ga[i] -= g[i];
                        }
                    }
                    UnKind::Exp => {
                        for i in 0..ga.len() {
                            ga[i] += g[i] * ov[i];
                        }
                    }
                    UnKind::Log => {
                        for i in 0..ga.len() {
                            ga[i] += g[i] / av[i];
                        }
                    }
                    UnKind::Sigmoid => {
                        for i in 0..ga.len() {
                            ga[i] += g[i] * ov[i] * (1.0 - ov[i]);
                        }
                    }
                    UnKind::Relu => {
                        for i in 0..ga.len() {
                            if av[i] > 0.0 {
                                ga[i] += g[i];
                            }
                        }
                    }
                    UnKind::Sqrt => {
                        for i in 0..ga.len() {
                            ga[i] += g[i] / (2.0 * ov[i]);
                        }
                    }
                    UnKind::Abs => {
                        for i in 0..ga.len() {
                            ga[i] += g[i] * av[i].signum() * if av[i] == 0.0 { 0.0 } else { 1.0 };
                        }
                    }
                });
            }
            grads[*out] = Some(g);
        }
        Op::Matmul { a, b, out, m, k, n } => {
            let Some(g) = grads[*out].take() else { return };
            if nodes[*a].requires_grad {
                let bv = &nodes[*b].value;
                add_into(&mut grads[*a], m * k, |ga| {
                    // ga += g . b^T
                    dgemm(*m, *n, *k, &g, *n as isize, 1, bv, 1, *n as isize, 1.0, ga);
                });
            }
            if nodes[*b].requires_grad {
                let av = &nodes[*a].value;
                add_into(&mut grads[*b], k * n, |gb| {
                    // gb += a^T . g
                    dgemm(*k, *m, *n, av, 1, *k as isize, &g, *n as isize, 1, 1.0, gb);
                });
            }
            grads[*out] = Some(g);
        }
        Op::Transpose { a, out, rows, cols } => {
            let Some(g) = grads[*out].take() else { return };
            if nodes[*a].requires_grad {
                add_into(&mut grads[*a], rows * cols, |ga| {
                    for i in 0..*rows {
                        for j in 0..*cols {
                            ga[i * cols + j] += g[j * rows + i];
                        }
                    }
                });
            }
            grads[*out] = Some(g);
        }
        Op::Reshape { a, out } => {
            let Some(g) = grads[*out].take() else { return };
            if nodes[*a].requires_grad {
                add_into(&mut grads[*a], g.len(), |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i];
                    }
                });
            }
            grads[*out] = Some(g);
        }
        Op::ConcatRows { parts, out, cols } => {
            let Some(g) = grads[*out].take() else { return };
            let mut off = 0;
            for p in parts {
                let rows = nodes[*p].value.len() / cols;
                if nodes[*p].requires_grad {
                    let block = &g[off..off + rows * cols];
                    add_into(&mut grads[*p], rows * cols, |gp| {
                        for i in 0..gp.len() {
                            gp[i] += block[i];
                        }
                    });
                }
                off += rows * cols;
            }
            grads[*out] = Some(g);
        }
        Op::ConcatCols { parts, out, rows } => {
            let Some(g) = grads[*out].take() else { return };
            let total_cols = nodes[*out].value.len() / rows;
            let mut off = 0;
            for p in parts {
                let w = nodes[*p].value.len() / rows;
                if nodes[*p].requires_grad {
                    add_into(&mut grads[*p], rows * w, |gp| {
                        for i in 0..*rows {
                            for j in 0..w {
                                gp[i * w + j] += g[i * total_cols + off + j];
                            }
                        }
                    });
                }
                off += w;
            }
            grads[*out] = Some(g);
        }
        Op::SliceCols { a, out, rows, cols, start, len } => {
            let Some(g) = grads[*out].take() else { return };
            if nodes[*a].requires_grad {
                add_into(&mut grads[*a], rows * cols, |ga| {
                    for i in 0..*rows {
                        for j in 0..*len {
                            ga[i * cols + start + j] += g[i * len + j];
                        }
                    }
                });
            }
            grads[*out] = Some(g);
        }
        Op::GatherRows { a, out, idx, cols } => {
            let Some(g) = grads[*out].take() else { return };
            if nodes[*a].requires_grad {
                let src_len = nodes[*a].value.len();
                add_into(&mut grads[*a], src_len, |ga| {
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..*cols {
                            ga[src * cols + j] += g[r * cols + j];
                        }
                    }
                });
            }
            grads[*out] = Some(g);
        }
        Op::SumAll { a, out } => {
            let Some(g) = grads[*out].take() else { return };
            if nodes[*a].requires_grad {
                let len = nodes[*a].value.len();
                add_into(&mut grads[*a], len, |ga| {
                    for v in ga.iter_mut() {
                        *v += g[0];
                    }
                });
            }
            grads[*out] = Some(g);
        }
        Op::MeanAll { a, out } => {
            let Some(g) = grads[*out].take() else { return };
            if nodes[*a].requires_grad {
                let len = nodes[*a].value.len();
                let scale = 1.0 / len.max(1) as f64;
                add_into(&mut grads[*a], len, |ga| {
                    for v in ga.iter_mut() {
                        *v += g[0] * scale;
                    }
                });
            }
            grads[*out] = Some(g);
        }
        Op::MaxLast { a, out, argmax } => {
            let Some(g) = grads[*out].take() else { return };
            if nodes[*a].requires_grad {
                let len = nodes[*a].value.len();
                let cols = len / argmax.len().max(1);
                add_into(&mut grads[*a], len, |ga| {
                    for (i, &j) in argmax.iter().enumerate() {
                        ga[i * cols + j] += g[i];
                    }
                });
            }
            grads[*out] = Some(g);
        }
        Op::SoftmaxRows { a, out, rows, cols } => {
            let Some(g) = grads[*out].take() else { return };
            if nodes[*a].requires_grad {
                let p = &nodes[*out].value;
                add_into(&mut grads[*a], rows * cols, |ga| {
                    for i in 0..*rows {
                        let base = i * cols;
                        let mut dot = 0.0;
                        for j in 0..*cols {
                            dot += g[base + j] * p[base + j];
                        }
                        for j in 0..*cols {
                            ga[base + j] += p[base + j] * (g[base + j] - dot);
                        }
                    }
                });
            }
            grads[*out] = Some(g);
        }
        Op::MaskedSoftmax { a, out, mask } => {
            let Some(g) = grads[*out].take() else { return };
            if nodes[*a].requires_grad {
                let p = &nodes[*out].value;
                let (rows, cols) = (mask.rows, mask.cols);
                add_into(&mut grads[*a], rows * cols, |ga| {
                    for i in 0..rows {
                        let base = i * cols;
                        let mut dot = 0.0;
                        for j in 0..cols {
                            if mask.is_visible(i, j) {
                                dot += g[base + j] * p[base + j];
                            }
                        }
                        for j in 0..cols {
                            if mask.is_visible(i, j) {
                                ga[base + j] += p[base + j] * (g[base + j] - dot);
                            }
                        }
                    }
                });
            }
            grads[*out] = Some(g);
        }
        Op::LayerNorm { a, gamma, beta, out, rows, cols, mean, rstd } => {
            let Some(g) = grads[*out].take() else { return };
            let av = &nodes[*a].value;
            let gav = &nodes[*gamma].value;
            let cf = *cols as f64;
            if nodes[*beta].requires_grad {
                add_into(&mut grads[*beta], *cols, |gb| {
                    for i in 0..*rows {
                        for j in 0..*cols {
                            gb[j] += g[i * cols + j];
                        }
                    }
                });
            }
            if nodes[*gamma].requires_grad {
                add_into(&mut grads[*gamma], *cols, |gg| {
                    for i in 0..*rows {
                        for j in 0..*cols {
                            let xh = (av[i * cols + j] - mean[i]) * rstd[i];
                            gg[j] += g[i * cols + j] * xh;
                        }
                    }
                });
            }
            if nodes[*a].requires_grad {
                add_into(&mut grads[*a], rows * cols, |ga| {
                    for i in 0..*rows {
                        let base = i * cols;
                        let mut sum_gy = 0.0;
                        let mut sum_gy_xh = 0.0;
                        for j in 0..*cols {
                            let gy = g[base + j] * gav[j];
                            let xh = (av[base + j] - mean[i]) * rstd[i];
                            sum_gy += gy;
                            sum_gy_xh += gy * xh;
                        }
                        for j in 0..*cols {
                            let gy = g[base + j] * gav[j];
                            let xh = (av[base + j] - mean[i]) * rstd[i];
                            ga[base + j] +=
                                rstd[i] * (gy - sum_gy / cf - xh * sum_gy_xh / cf);
                        }
                    }
                });
            }
            grads[*out] = Some(g);
        }
    }
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Evaluation of a scalar function for [`grad_check`]: the loss value and,
/// when requested, the analytic gradient for each parameter in order.
pub type ScalarEval = (f64, Option<Vec<Vec<f64>>>);

/// Compare analytic gradients against central finite differences.
///
/// `f` evaluates the scalar function on the given parameters; it must
/// return analytic gradients (one buffer per parameter, matching shapes)
/// when `want_grad` is true. Returns the maximum relative error
/// `|analytic - numeric| / max(1, |analytic| + |numeric|)` over all
/// coordinates.
pub fn grad_check<F>(f: F, params: &[Param], step: f64) -> Result<f64>
where
    F: Fn(&[Param], bool) -> Result<ScalarEval>,
{
    let (v0, grads) = f(params, true)?;
    if !v0.is_finite() {
        return Err(TensorError::Domain {
            op: "grad_check",
            detail: format!("function value is not finite: {v0}"),
        });
    }
    let grads = grads.ok_or_else(|| {
        TensorError::Invalid("grad_check: function returned no analytic gradients".into())
    })?;
    if grads.len() != params.len() {
        return Err(TensorError::Invalid(format!(
            "grad_check: {} gradient buffers for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    let mut worst = 0.0f64;
    let mut work: Vec<Param> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        if grads[pi].len() != p.numel() {
            return Err(TensorError::Invalid(format!(
                "grad_check: gradient length {} does not match parameter {} ({} values)",
                grads[pi].len(),
                pi,
                p.numel()
            )));
        }
        for c in 0..p.numel() {
            let orig = p.data[c];
            work[pi].data[c] = orig + step;
            let (fp, _) = f(&work, false)?;
            work[pi].data[c] = orig - step;
            let (fm, _) = f(&work, false)?;
            work[pi].data[c] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(TensorError::Domain {
                    op: "grad_check",
                    detail: "perturbed function value is not finite".into(),
                });
            }
            let numeric = (fp - fm) / (2.0 * step);
            let analytic = grads[pi][c];
            let err = (analytic - numeric).abs() / 1.0f64.max(analytic.abs() + numeric.abs());
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_scalar(f: impl Fn(f64) -> f64, x: f64, step: f64) -> f64 {
        (f(x + step) - f(x - step)) / (2.0 * step)
    }

    #[test]
    fn exp_of_zero_and_one() {
        let t = Tape::new();
        let x = t.var(vec![0.0, 1.0], vec![2]);
        let y = x.exp();
        let v = y.value();
        assert_eq!(v[0], 1.0);
        assert!((v[1] - std::f64::consts::E).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_symmetry_at_zero() {
        let t = Tape::new();
        let x = t.var(vec![0.0], vec![1]);
        assert_eq!(x.sigmoid().item(), 0.5);
    }

    #[test]
    fn square_gradient_matches_finite_difference() {
        // d/dx (x*x) at x=3 via the tape vs central differences.
        let t = Tape::new();
        let x = t.var(vec![3.0], vec![1]);
        let y = x.mul(&x).unwrap();
        let grads = t.backward(&y).unwrap();
        let analytic = grads.wrt(&x).unwrap()[0];
        let numeric = fd_scalar(|v| v * v, 3.0, 1e-5);
        assert!((analytic - 6.0).abs() < 1e-12);
        assert!((analytic - numeric).abs() < 1e-6);
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let t = Tape::new();
        let i2 = t.var(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]);
        let a = t.var(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]);
        assert_eq!(i2.matmul(&a).unwrap().value(), vec![1.0, 2.0, 3.0, 4.0]);

        let r = t.var(vec![1.0, 2.0], vec![1, 2]);
        let c = t.var(vec![3.0, 4.0], vec![2, 1]);
        assert_eq!(r.matmul(&c).unwrap().value(), vec![11.0]);
    }

    #[test]
    fn matmul_grad_is_ones_times_b_transpose() {
        let t = Tape::new();
        let a = t.var(vec![0.5, -1.0, 2.0, 0.25, 3.0, -0.75], vec![2, 3]);
        let b = t.var(vec![1.0, 2.0, -0.5, 0.0, 1.5, -2.0], vec![3, 2]);
        let y = a.matmul(&b).unwrap().sum_all();
        let grads = t.backward(&y).unwrap();
        let ga = grads.wrt(&a).unwrap();
        // ones[2x2] . b^T
        let bt = [1.0 + 2.0, -0.5 + 0.0, 1.5 + -2.0];
        for i in 0..2 {
            for j in 0..3 {
                assert!((ga[i * 3 + j] - bt[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_softmax_uniform_and_single() {
        let t = Tape::new();
        let x = t.var(vec![0.0, 0.0, 0.0], vec![1, 3]);
        let mask = Rc::new(AttnMask::build(1, 3, |_, j| j > 0));
        let y = x.masked_softmax(&mask).unwrap().value();
        assert_eq!(y[0], 0.0);
        assert!((y[1] - 0.5).abs() < 1e-15);
        assert!((y[2] - 0.5).abs() < 1e-15);

        let single = Rc::new(AttnMask::build(1, 3, |_, j| j == 2));
        let z = x.masked_softmax(&single).unwrap().value();
        assert_eq!(z, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn masked_softmax_all_visible_matches_plain_softmax() {
        let t = Tape::new();
        let x = t.var(vec![1.0, 2.0, 3.0], vec![1, 3]);
        let mask = Rc::new(AttnMask::all_visible(1, 3));
        let a = x.masked_softmax(&mask).unwrap().value();
        // independent softmax oracle
        let exps: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let s: f64 = exps.iter().sum();
        for j in 0..3 {
            assert!((a[j] - exps[j] / s).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_softmax_empty_row_is_an_error() {
        let t = Tape::new();
        let x = t.var(vec![0.0, 0.0], vec![1, 2]);
        let mask = Rc::new(AttnMask::build(1, 2, |_, _| false));
        let err = x.masked_softmax(&mask).unwrap_err();
        assert!(err.to_string().contains("empty attention scope"));
    }

    #[test]
    fn gather_rows_identity_and_inverse() {
        let t = Tape::new();
        let x = t.var(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![3, 2]);
        let id = x.gather_rows(&[0, 1, 2]).unwrap();
        assert_eq!(id.value(), x.value());

        let perm = [2usize, 0, 1];
        let mut inv = [0usize; 3];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let y = x.gather_rows(&perm).unwrap().gather_rows(&inv).unwrap();
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn gather_rows_out_of_range() {
        let t = Tape::new();
        let x = t.var(vec![1.0, 2.0], vec![1, 2]);
        assert!(x.gather_rows(&[1]).is_err());
    }

    #[test]
    fn max_last_picks_maximum() {
        let t = Tape::new();
        let x = t.var(vec![0.2, 0.9, 0.5], vec![1, 3]);
        assert_eq!(x.max_last().unwrap().value(), vec![0.9]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let t = Tape::new();
        let a = t.var(vec![0.0; 6], vec![2, 3]);
        let b = t.var(vec![0.0; 4], vec![2, 2]);
        let err = a.add(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn log_of_nonpositive_is_an_error() {
        let t = Tape::new();
        let x = t.var(vec![0.0], vec![1]);
        assert!(x.log().is_err());
        let y = t.var(vec![-1.0], vec![1]);
        assert!(y.log().is_err());
    }

    #[test]
    fn div_by_zero_is_an_error() {
        let t = Tape::new();
        let a = t.var(vec![1.0], vec![1]);
        let b = t.var(vec![0.0], vec![1]);
        assert!(a.div(&b).is_err());
    }

    #[test]
    fn grad_check_sum_of_squares() {
        let p = Param::new(vec![3], vec![1.0, 2.0, 3.0]);
        let err = grad_check(
            |ps, want| {
                let t = Tape::new();
                let x = t.param(&ps[0]);
                let y = x.mul(&x).unwrap().sum_all();
                let v = y.item();
                let g = if want {
                    let grads = t.backward(&y).unwrap();
                    Some(vec![grads.of_param(ps[0].id).unwrap().to_vec()])
                } else {
                    None
                };
                Ok((v, g))
            },
            &[p],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn grad_check_constant_function() {
        let p = Param::new(vec![2], vec![0.3, -0.7]);
        let err = grad_check(
            |ps, want| {
                let t = Tape::new();
                let x = t.param(&ps[0]);
                // multiply by zero so the value is constant but the graph
                // still touches the parameter
                let y = x.mul_scalar(0.0).sum_all();
                let v = y.item();
                let g = if want {
                    let grads = t.backward(&y).unwrap();
                    Some(vec![grads.of_param(ps[0].id).unwrap().to_vec()])
                } else {
                    None
                };
                Ok((v, g))
            },
            &[p],
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let t = Tape::new();
            let x = t.var(vec![0.3, -1.2, 0.77, 2.4], vec![2, 2]);
            let w = t.var(vec![0.1, -0.4, 0.9, 0.2], vec![2, 2]);
            let y = x
                .matmul(&w)
                .unwrap()
                .sigmoid()
                .mul(&x)
                .unwrap()
                .softmax_rows()
                .unwrap()
                .sum_all();
            let g = t.backward(&y).unwrap();
            (y.item(), g.wrt(&x).unwrap().to_vec(), g.wrt(&w).unwrap().to_vec())
        };
        let (v1, gx1, gw1) = run();
        let (v2, gx2, gw2) = run();
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert_eq!(
            gx1.iter().map(|f| f.to_bits()).collect::<Vec<_>>(),
            gx2.iter().map(|f| f.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(
            gw1.iter().map(|f| f.to_bits()).collect::<Vec<_>>(),
            gw2.iter().map(|f| f.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn masked_softmax_rows_sum_to_one_over_visible() {
        let t = Tape::new();
        let x = t.var(
            (0..20).map(|i| (i as f64 * 0.37).sin() * 3.0).collect(),
            vec![4, 5],
        );
        let mask = Rc::new(AttnMask::build(4, 5, |i, j| j <= i + 1));
        let y = x.masked_softmax(&mask).unwrap().value();
        for i in 0..4 {
            let mut s = 0.0;
            for j in 0..5 {
                if mask.is_visible(i, j) {
                    s += y[i * 5 + j];
                } else {
                    assert_eq!(y[i * 5 + j], 0.0);
                }
            }
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
