//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Computations are recorded on an append-only [`Tape`]; every value is a
//! node identified by a [`NodeId`]. Gradients of gradients are supported by
//! emitting the backward pass itself as new tape nodes (`create_graph`), so
//! a gradient can be differentiated again like any other value.
//!
//! Numerical ground rules:
//! - dense 64-bit reals only, shapes are scalar / vector / matrix;
//! - no implicit broadcasting — shape mismatches are errors;
//! - every primitive checks its output for NaN/Inf and fails loudly;
//! - `log` refuses arguments below 1e-300 instead of returning `-inf`.

mod grad;

use crate::error::{Error, Result};
use smallvec::SmallVec;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that
/// created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) u32);

impl NodeId {
    #[inline]
    pub(crate) fn idx(self) -> usize {
        self.0 as usize
    }
}

/// Shape of a node's value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dims {
    Scalar,
    Vector(u32),
    Matrix(u32, u32),
}

impl Dims {
    #[inline]
    pub fn len(&self) -> usize {
        match *self {
            Dims::Scalar => 1,
            Dims::Vector(n) => n as usize,
            Dims::Matrix(r, c) => r as usize * c as usize,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Dimension sizes as a list ([] for scalars).
    pub fn shape(&self) -> SmallVec<[usize; 2]> {
        match *self {
            Dims::Scalar => SmallVec::new(),
            Dims::Vector(n) => SmallVec::from_slice(&[n as usize]),
            Dims::Matrix(r, c) => SmallVec::from_slice(&[r as usize, c as usize]),
        }
    }
}

/// Primitive identifier plus any compile-time payload.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    PowScalar(f64),
    ScaleConst(f64),
    Sum,
    Mean,
    IndexSelect(Box<[u32]>),
    ScatterTo(Box<[u32]>),
    BroadcastTo,
    MatVec,
    MatVecT,
    Outer,
    Concat,
    Softmax,
    LogSumExp,
    Sigmoid,
    Softplus,
    StopGrad,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::PowScalar(_) => "pow_scalar",
            Op::ScaleConst(_) => "scale",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::IndexSelect(_) => "index_select",
            Op::ScatterTo(_) => "scatter_to",
            Op::BroadcastTo => "broadcast_to",
            Op::MatVec => "matvec",
            Op::MatVecT => "matvec_t",
            Op::Outer => "outer",
            Op::Concat => "concat",
            Op::Softmax => "softmax",
            Op::LogSumExp => "logsumexp",
            Op::Sigmoid => "sigmoid",
            Op::Softplus => "softplus",
            Op::StopGrad => "stop_gradient",
        }
    }
}

/// Node value storage. Scalars stay inline; larger arrays go to the heap.
#[derive(Debug, Clone)]
pub(crate) enum Val {
    Scalar(f64),
    Arr(Box<[f64]>),
}

impl Val {
    #[inline]
    fn as_slice(&self) -> &[f64] {
        match self {
            Val::Scalar(v) => std::slice::from_ref(v),
            Val::Arr(a) => a,
        }
    }
}

pub(crate) type Parents = SmallVec<[NodeId; 2]>;

/// One value in the re-differentiable computation graph.
#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) parents: Parents,
    pub(crate) values: Val,
    pub(crate) dims: Dims,
    pub(crate) tracked: bool,
}

/// Append-only record of primitive applications.
///
/// A tape is confined to one worker. Construction never consumes
/// randomness, so replaying the same primitive sequence yields bit-identical
/// values and gradients.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Floor below which `log` arguments are rejected rather than allowed to
/// drift toward `-inf`.
pub const LOG_FLOOR: f64 = 1e-300;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn with_capacity(n: usize) -> Self {
        Tape { nodes: Vec::with_capacity(n) }
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub(crate) fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.idx()]
    }

    /// Value of a node as a flat slice (row-major for matrices).
    #[inline]
    pub fn values(&self, id: NodeId) -> &[f64] {
        self.node(id).values.as_slice()
    }

    /// Value of a scalar node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.node(id).dims, Dims::Scalar);
        match self.node(id).values {
            Val::Scalar(v) => v,
            Val::Arr(ref a) => a[0],
        }
    }

    pub fn dims(&self, id: NodeId) -> Dims {
        self.node(id).dims
    }

    pub fn is_tracked(&self, id: NodeId) -> bool {
        self.node(id).tracked
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.idx() >= self.nodes.len() {
            return Err(Error::NodeOutOfRange { id: id.0, len: self.nodes.len() });
        }
        Ok(())
    }

    fn push(&mut self, op: Op, parents: Parents, values: Vec<f64>, dims: Dims) -> Result<NodeId> {
        debug_assert_eq!(values.len(), dims.len());
        for &v in &values {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    op: op.name(),
                    detail: format!("produced {v}"),
                });
            }
        }
        let tracked = !matches!(op, Op::StopGrad)
            && parents.iter().any(|&p| self.node(p).tracked);
        self.push_unchecked(op, parents, values, dims, tracked)
    }

    fn push_unchecked(
        &mut self,
        op: Op,
        parents: Parents,
        values: Vec<f64>,
        dims: Dims,
        tracked: bool,
    ) -> Result<NodeId> {
        let id = self.nodes.len();
        if id > u32::MAX as usize {
            return Err(Error::InstanceTooLarge { detail: "tape exceeds u32 node limit".into() });
        }
        let values = match dims {
            Dims::Scalar => Val::Scalar(values[0]),
            _ => Val::Arr(values.into_boxed_slice()),
        };
        self.nodes.push(Node { op, parents, values, dims, tracked });
        Ok(NodeId(id as u32))
    }

    // ---- leaves ------------------------------------------------------

    /// Parentless scalar node.
    pub fn leaf_scalar(&mut self, value: f64, tracked: bool) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::Domain { op: "leaf", detail: format!("non-finite input {value}") });
        }
        self.push_unchecked(Op::Leaf, Parents::new(), vec![value], Dims::Scalar, tracked)
    }

    /// Parentless vector node.
    pub fn leaf(&mut self, values: &[f64], tracked: bool) -> Result<NodeId> {
        for &v in values {
            if !v.is_finite() {
                return Err(Error::Domain {
                    op: "leaf",
                    detail: format!("non-finite input {v}"),
                });
            }
        }
        let n = values.len() as u32;
        self.push_unchecked(Op::Leaf, Parents::new(), values.to_vec(), Dims::Vector(n), tracked)
    }

    /// Parentless row-major matrix node.
    pub fn leaf_mat(&mut self, rows: usize, cols: usize, values: &[f64], tracked: bool) -> Result<NodeId> {
        if values.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                detail: format!("{} values for {rows}x{cols} matrix", values.len()),
            });
        }
        for &v in values {
            if !v.is_finite() {
                return Err(Error::Domain {
                    op: "leaf",
                    detail: format!("non-finite input {v}"),
                });
            }
        }
        self.push_unchecked(
            Op::Leaf,
            Parents::new(),
            values.to_vec(),
            Dims::Matrix(rows as u32, cols as u32),
            tracked,
        )
    }

    pub(crate) fn push_raw(&mut self, node: Node) {
        self.nodes.push(node);
    }

    // ---- elementwise primitives ---------------------------------------

    fn binary_same_shape(&mut self, op: Op, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let da = self.node(a).dims;
        let db = self.node(b).dims;
        if da != db {
            return Err(Error::ShapeMismatch {
                op: op.name(),
                detail: format!("{:?} vs {:?}", da.shape(), db.shape()),
            });
        }
        let va = self.node(a).values.as_slice();
        let vb = self.node(b).values.as_slice();
        let out: Vec<f64> = match op {
            Op::Add => va.iter().zip(vb).map(|(x, y)| x + y).collect(),
            Op::Sub => va.iter().zip(vb).map(|(x, y)| x - y).collect(),
            Op::Mul => va.iter().zip(vb).map(|(x, y)| x * y).collect(),
            Op::Div => {
                if let Some(i) = vb.iter().position(|&y| y == 0.0) {
                    return Err(Error::Domain {
                        op: "div",
                        detail: format!("division by zero at index {i}"),
                    });
                }
                va.iter().zip(vb).map(|(x, y)| x / y).collect()
            }
            _ => unreachable!(),
        };
        self.push(op, SmallVec::from_slice(&[a, b]), out, da)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(Op::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(Op::Div, a, b)
    }

    fn unary<F: Fn(f64) -> f64>(&mut self, op: Op, a: NodeId, f: F) -> Result<NodeId> {
        self.check(a)?;
        let dims = self.node(a).dims;
        let out: Vec<f64> = self.node(a).values.as_slice().iter().map(|&x| f(x)).collect();
        self.push(op, SmallVec::from_slice(&[a]), out, dims)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Neg, a, |x| -x)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Exp, a, f64::exp)
    }

    /// Natural log. Arguments below [`LOG_FLOOR`] raise a domain error with
    /// the offending value rather than propagating `-inf`.
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let vals = self.node(a).values.as_slice();
        if let Some((i, &v)) = vals.iter().enumerate().find(|(_, &v)| v < LOG_FLOOR) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("argument {v} at index {i} is below the {LOG_FLOOR} floor"),
            });
        }
        self.unary(Op::Log, a, f64::ln)
    }

    /// Elementwise `x^p` for a compile-time exponent.
    pub fn pow_scalar(&mut self, a: NodeId, p: f64) -> Result<NodeId> {
        self.check(a)?;
        for &x in self.node(a).values.as_slice() {
            if x < 0.0 && p.fract() != 0.0 {
                return Err(Error::Domain {
                    op: "pow_scalar",
                    detail: format!("negative base {x} with non-integer exponent {p}"),
                });
            }
            if x == 0.0 && p < 0.0 {
                return Err(Error::Domain {
                    op: "pow_scalar",
                    detail: format!("zero base with negative exponent {p}"),
                });
            }
        }
        self.unary(Op::PowScalar(p), a, |x| x.powf(p))
    }

    /// Elementwise multiplication by a compile-time constant.
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        if !c.is_finite() {
            return Err(Error::Domain { op: "scale", detail: format!("non-finite factor {c}") });
        }
        self.unary(Op::ScaleConst(c), a, |x| x * c)
    }

    // ---- reductions and reshaping -------------------------------------

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let s = self.node(a).values.as_slice().iter().sum();
        self.push(Op::Sum, SmallVec::from_slice(&[a]), vec![s], Dims::Scalar)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let vals = self.node(a).values.as_slice();
        if vals.is_empty() {
            return Err(Error::Empty("mean of zero elements"));
        }
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        self.push(Op::Mean, SmallVec::from_slice(&[a]), vec![m], Dims::Scalar)
    }

    /// Gather flat (row-major) indices into a vector.
    pub fn index_select(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        self.check(a)?;
        let vals = self.node(a).values.as_slice();
        let mut out = Vec::with_capacity(indices.len());
        let mut idx = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= vals.len() {
                return Err(Error::ShapeMismatch {
                    op: "index_select",
                    detail: format!("index {i} out of range for length {}", vals.len()),
                });
            }
            out.push(vals[i]);
            idx.push(i as u32);
        }
        let n = out.len() as u32;
        self.push(
            Op::IndexSelect(idx.into_boxed_slice()),
            SmallVec::from_slice(&[a]),
            out,
            Dims::Vector(n),
        )
    }

    /// Single flat element as a scalar node.
    pub fn at(&mut self, a: NodeId, index: usize) -> Result<NodeId> {
        self.check(a)?;
        let vals = self.node(a).values.as_slice();
        if index >= vals.len() {
            return Err(Error::ShapeMismatch {
                op: "index_select",
                detail: format!("index {index} out of range for length {}", vals.len()),
            });
        }
        let v = vals[index];
        self.push(
            Op::IndexSelect(Box::new([index as u32])),
            SmallVec::from_slice(&[a]),
            vec![v],
            Dims::Scalar,
        )
    }

    /// Scatter a vector into a zero-filled vector of length `len`
    /// (adjoint of `index_select`; duplicate indices accumulate).
    pub(crate) fn scatter_to(&mut self, a: NodeId, len: usize, indices: &[u32]) -> Result<NodeId> {
        self.check(a)?;
        let vals = self.node(a).values.as_slice();
        debug_assert_eq!(vals.len(), indices.len());
        let mut out = vec![0.0; len];
        for (&i, &v) in indices.iter().zip(vals) {
            out[i as usize] += v;
        }
        self.push(
            Op::ScatterTo(indices.to_vec().into_boxed_slice()),
            SmallVec::from_slice(&[a]),
            out,
            Dims::Vector(len as u32),
        )
    }

    /// Repeat a scalar into a vector of length `len`.
    pub fn broadcast_to(&mut self, a: NodeId, len: usize) -> Result<NodeId> {
        self.check(a)?;
        if self.node(a).dims != Dims::Scalar {
            return Err(Error::ShapeMismatch {
                op: "broadcast_to",
                detail: format!("expected scalar, got {:?}", self.node(a).dims.shape()),
            });
        }
        let v = self.scalar(a);
        self.push(
            Op::BroadcastTo,
            SmallVec::from_slice(&[a]),
            vec![v; len],
            Dims::Vector(len as u32),
        )
    }

    /// Concatenate scalar and vector nodes into one vector.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Empty("concat of zero parts"));
        }
        let mut out = Vec::new();
        for &p in parts {
            self.check(p)?;
            if matches!(self.node(p).dims, Dims::Matrix(_, _)) {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    detail: "matrix operand".into(),
                });
            }
            out.extend_from_slice(self.node(p).values.as_slice());
        }
        let n = out.len() as u32;
        self.push(Op::Concat, SmallVec::from_slice(parts), out, Dims::Vector(n))
    }

    // ---- linear algebra ------------------------------------------------

    /// Matrix-vector product `m v`.
    pub fn matvec(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        self.check(m)?;
        self.check(v)?;
        let (r, c) = match self.node(m).dims {
            Dims::Matrix(r, c) => (r as usize, c as usize),
            d => {
                return Err(Error::ShapeMismatch {
                    op: "matvec",
                    detail: format!("first operand has shape {:?}", d.shape()),
                })
            }
        };
        let vd = self.node(v).dims;
        if vd != Dims::Vector(c as u32) {
            return Err(Error::ShapeMismatch {
                op: "matvec",
                detail: format!("matrix is {r}x{c}, vector has shape {:?}", vd.shape()),
            });
        }
        let mv = self.node(m).values.as_slice();
        let vv = self.node(v).values.as_slice();
        let mut out = vec![0.0; r];
        for (i, o) in out.iter_mut().enumerate() {
            let row = &mv[i * c..(i + 1) * c];
            *o = row.iter().zip(vv).map(|(a, b)| a * b).sum();
        }
        self.push(Op::MatVec, SmallVec::from_slice(&[m, v]), out, Dims::Vector(r as u32))
    }

    /// Transposed matrix-vector product `mᵀ v`.
    pub(crate) fn matvec_t(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        self.check(m)?;
        self.check(v)?;
        let (r, c) = match self.node(m).dims {
            Dims::Matrix(r, c) => (r as usize, c as usize),
            d => {
                return Err(Error::ShapeMismatch {
                    op: "matvec_t",
                    detail: format!("first operand has shape {:?}", d.shape()),
                })
            }
        };
        if self.node(v).dims != Dims::Vector(r as u32) {
            return Err(Error::ShapeMismatch {
                op: "matvec_t",
                detail: format!("matrix is {r}x{c}, vector has shape {:?}", self.node(v).dims.shape()),
            });
        }
        let mv = self.node(m).values.as_slice();
        let vv = self.node(v).values.as_slice();
        let mut out = vec![0.0; c];
        for i in 0..r {
            let row = &mv[i * c..(i + 1) * c];
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * vv[i];
            }
        }
        self.push(Op::MatVecT, SmallVec::from_slice(&[m, v]), out, Dims::Vector(c as u32))
    }

    /// Outer product `u wᵀ` (adjoint of matvec with respect to the matrix).
    pub(crate) fn outer(&mut self, u: NodeId, w: NodeId) -> Result<NodeId> {
        self.check(u)?;
        self.check(w)?;
        let (r, c) = match (self.node(u).dims, self.node(w).dims) {
            (Dims::Vector(r), Dims::Vector(c)) => (r as usize, c as usize),
            (du, dw) => {
                return Err(Error::ShapeMismatch {
                    op: "outer",
                    detail: format!("{:?} x {:?}", du.shape(), dw.shape()),
                })
            }
        };
        let uv = self.node(u).values.as_slice();
        let wv = self.node(w).values.as_slice();
        let mut out = Vec::with_capacity(r * c);
        for &a in uv {
            for &b in wv {
                out.push(a * b);
            }
        }
        self.push(Op::Outer, SmallVec::from_slice(&[u, w]), out, Dims::Matrix(r as u32, c as u32))
    }

    // ---- nonlinearities --------------------------------------------------

    /// Numerically stable softmax of a vector (max-subtraction).
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let dims = self.node(a).dims;
        let vals = self.node(a).values.as_slice();
        if !matches!(dims, Dims::Vector(_)) || vals.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "softmax",
                detail: "expected a non-empty vector".into(),
            });
        }
        let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut out: Vec<f64> = vals.iter().map(|&x| (x - m).exp()).collect();
        let z: f64 = out.iter().sum();
        for o in &mut out {
            *o /= z;
        }
        self.push(Op::Softmax, SmallVec::from_slice(&[a]), out, dims)
    }

    /// Elementwise logistic sigmoid, stable for large |x|.
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Sigmoid, a, |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    /// Elementwise `ln(1 + e^x)`, stable for large |x|.
    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Softplus, a, |x| {
            if x > 0.0 {
                x + (-x).exp().ln_1p()
            } else {
                x.exp().ln_1p()
            }
        })
    }

    /// Identity value with zero gradient.
    pub fn stop_gradient(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let dims = self.node(a).dims;
        let vals = self.node(a).values.as_slice().to_vec();
        self.push(Op::StopGrad, SmallVec::from_slice(&[a]), vals, dims)
    }

    // ---- composites ------------------------------------------------------

    /// `exp(x - stop_gradient(x))`: evaluates to exactly 1, first
    /// derivative passes `∂x` through unchanged.
    pub fn magic_box(&mut self, a: NodeId) -> Result<NodeId> {
        let frozen = self.stop_gradient(a)?;
        let centered = self.sub(a, frozen)?;
        self.exp(centered)
    }

    /// `log Σ exp(x)` of a vector, max-subtracted for stability. The
    /// gradient is the softmax of the input, so higher-order derivatives
    /// flow through the softmax primitive.
    pub fn logsumexp(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let vals = self.node(a).values.as_slice();
        if vals.is_empty() {
            return Err(Error::Empty("logsumexp of zero elements"));
        }
        let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let out = m + vals.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        self.push(Op::LogSumExp, SmallVec::from_slice(&[a]), vec![out], Dims::Scalar)
    }

    /// `x - logsumexp(x)`, the stable log of softmax.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let n = self.node(a).dims.len();
        let lse = self.logsumexp(a)?;
        let b = self.broadcast_to(lse, n)?;
        self.sub(a, b)
    }

    /// Dot product of two vectors as a scalar node.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    /// View a vector of length `rows * cols` as a row-major matrix.
    /// Element order is unchanged; gradients pass straight through.
    pub fn view_matrix(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        self.check(a)?;
        let len = self.node(a).dims.len();
        if len != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "view_matrix",
                detail: format!("{len} elements cannot view as {rows}x{cols}"),
            });
        }
        let vals = self.node(a).values.as_slice().to_vec();
        let indices: Vec<u32> = (0..len as u32).collect();
        let tracked = self.node(a).tracked;
        let node = Node {
            op: Op::IndexSelect(indices.into_boxed_slice()),
            parents: SmallVec::from_slice(&[a]),
            values: Val::Arr(vals.into_boxed_slice()),
            dims: Dims::Matrix(rows as u32, cols as u32),
            tracked,
        };
        let id = self.nodes.len();
        if id > u32::MAX as usize {
            return Err(Error::InstanceTooLarge { detail: "tape exceeds u32 node limit".into() });
        }
        self.push_raw(node);
        Ok(NodeId(id as u32))
    }
}
