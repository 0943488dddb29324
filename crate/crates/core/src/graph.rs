//! Reverse-mode automatic differentiation over dense tensors.
//!
//! The graph is rebuilt on every training step (define-by-run). Each op
//! appends a node holding its output value; `backward` walks the node list in
//! reverse creation order, which is a reverse topological order by
//! construction, and accumulates gradients additively. All reductions use a
//! fixed sequential order so runs are bitwise reproducible.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(usize);

impl TensorId {
    /// Position of the node in its graph's creation order.
    pub fn index(&self) -> usize {
        self.0
    }
}

/// How a binary op's right-hand side maps onto the left-hand shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    /// Identical shapes.
    Same,
    /// rhs is a length-d vector (or 1 x d) applied to every row of an n x d lhs.
    RowVec,
    /// rhs is n x 1, applied to every column of an n x d lhs.
    ColVec,
    /// rhs is a single element.
    ScalarRhs,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(TensorId, TensorId, Broadcast),
    Sub(TensorId, TensorId, Broadcast),
    Mul(TensorId, TensorId, Broadcast),
    /// a * x + b elementwise; only the multiplier is needed for backward.
    Affine(TensorId, f64),
    Matmul(TensorId, TensorId),
    /// a @ b^T where b is stored row-major as [p x m].
    MatmulTB(TensorId, TensorId),
    Concat(TensorId, TensorId, usize),
    Slice(TensorId, usize, usize, usize),
    Sum(TensorId),
    Mean(TensorId),
    Exp(TensorId),
    Log(TensorId),
    Tanh(TensorId),
    Sigmoid(TensorId),
    Softmax(TensorId, usize),
    LogSoftmax(TensorId, usize),
    /// Pairwise squared Euclidean distances between rows of two matrices.
    SqDist(TensorId, TensorId),
    /// Gradient reversal: identity forward, -lambda * upstream backward.
    Grl(TensorId, f64),
    Reshape(TensorId),
    GatherRows(TensorId, Vec<usize>),
    /// Each input row repeated `times` consecutive output rows.
    RepeatRows(TensorId, usize),
    /// Sums consecutive blocks of `block` rows into one output row.
    SumRowBlocks(TensorId, usize),
    Clamp(TensorId, f64, f64),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    /// Inserts a differentiable leaf (a parameter).
    pub fn leaf(&mut self, value: Tensor) -> TensorId {
        self.push(Op::Leaf, value, true)
    }

    /// Inserts a non-differentiable leaf (input data).
    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: TensorId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> TensorId {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            requires_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn needs_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn finite(&self, t: Tensor, op: &'static str) -> Result<Tensor> {
        if t.is_finite() {
            Ok(t)
        } else {
            Err(CoreError::NonFinite { op })
        }
    }

    // ── binary elementwise ops ──

    fn broadcast_kind(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<Broadcast> {
        let (ls, rs) = (self.value(a).shape(), self.value(b).shape());
        if ls == rs {
            return Ok(Broadcast::Same);
        }
        let lhs = self.value(a);
        let rhs = self.value(b);
        if rhs.numel() == 1 {
            return Ok(Broadcast::ScalarRhs);
        }
        if lhs.rank() == 2 {
            if rhs.numel() == lhs.cols() && (rhs.rank() == 1 || rhs.rows() == 1) {
                return Ok(Broadcast::RowVec);
            }
            if rhs.rank() == 2 && rhs.cols() == 1 && rhs.rows() == lhs.rows() {
                return Ok(Broadcast::ColVec);
            }
        }
        Err(CoreError::ShapeMismatch {
            op,
            lhs: ls.to_vec(),
            rhs: rs.to_vec(),
        })
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(TensorId, TensorId, Broadcast) -> Op,
    ) -> Result<TensorId> {
        let bc = self.broadcast_kind(op_name, a, b)?;
        let lhs = self.value(a);
        let rhs = self.value(b);
        let mut out = lhs.clone();
        let cols = lhs.cols();
        match bc {
            Broadcast::Same => {
                for (o, r) in out.data_mut().iter_mut().zip(rhs.data()) {
                    *o = f(*o, *r);
                }
            }
            Broadcast::ScalarRhs => {
                let r = rhs.data()[0];
                for o in out.data_mut() {
                    *o = f(*o, r);
                }
            }
            Broadcast::RowVec => {
                let r = rhs.data();
                for (i, o) in out.data_mut().iter_mut().enumerate() {
                    *o = f(*o, r[i % cols]);
                }
            }
            Broadcast::ColVec => {
                let r = rhs.data();
                for (i, o) in out.data_mut().iter_mut().enumerate() {
                    *o = f(*o, r[i / cols]);
                }
            }
        }
        let rg = self.needs_grad(&[a, b]);
        let out = self.finite(out, op_name)?;
        Ok(self.push(make(a, b, bc), out, rg))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Elementwise a * x + b with scalar constants.
    pub fn affine(&mut self, x: TensorId, a: f64, b: f64) -> Result<TensorId> {
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            *o = a * *o + b;
        }
        let rg = self.needs_grad(&[x]);
        let out = self.finite(out, "affine")?;
        Ok(self.push(Op::Affine(x, a), out, rg))
    }

    pub fn scale(&mut self, x: TensorId, a: f64) -> Result<TensorId> {
        self.affine(x, a, 0.0)
    }

    pub fn one_minus(&mut self, x: TensorId) -> Result<TensorId> {
        self.affine(x, -1.0, 1.0)
    }

    // ── matrix products ──

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (lhs, rhs) = (self.value(a), self.value(b));
        if lhs.rank() != 2 || rhs.rank() != 2 || lhs.cols() != rhs.rows() {
            return Err(CoreError::ShapeMismatch {
                op: "matmul",
                lhs: lhs.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let out = mm(lhs, rhs);
        let rg = self.needs_grad(&[a, b]);
        let out = self.finite(out, "matmul")?;
        Ok(self.push(Op::Matmul(a, b), out, rg))
    }

    /// a @ b^T with b stored [p x m]; the natural form for y = x W^T.
    pub fn matmul_tb(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (lhs, rhs) = (self.value(a), self.value(b));
        if lhs.rank() != 2 || rhs.rank() != 2 || lhs.cols() != rhs.cols() {
            return Err(CoreError::ShapeMismatch {
                op: "matmul_tb",
                lhs: lhs.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let out = mm_tb(lhs, rhs);
        let rg = self.needs_grad(&[a, b]);
        let out = self.finite(out, "matmul_tb")?;
        Ok(self.push(Op::MatmulTB(a, b), out, rg))
    }

    // ── structural ops ──

    pub fn concat(&mut self, a: TensorId, b: TensorId, axis: usize) -> Result<TensorId> {
        let (lhs, rhs) = (self.value(a), self.value(b));
        let mismatch = || CoreError::ShapeMismatch {
            op: "concat",
            lhs: lhs.shape().to_vec(),
            rhs: rhs.shape().to_vec(),
        };
        if lhs.rank() != 2 || rhs.rank() != 2 {
            return Err(mismatch());
        }
        let out = match axis {
            0 => {
                if lhs.cols() != rhs.cols() {
                    return Err(mismatch());
                }
                let mut data = Vec::with_capacity(lhs.numel() + rhs.numel());
                data.extend_from_slice(lhs.data());
                data.extend_from_slice(rhs.data());
                Tensor::new(vec![lhs.rows() + rhs.rows(), lhs.cols()], data)?
            }
            1 => {
                if lhs.rows() != rhs.rows() {
                    return Err(mismatch());
                }
                let (n, c1, c2) = (lhs.rows(), lhs.cols(), rhs.cols());
                let mut data = Vec::with_capacity(lhs.numel() + rhs.numel());
                for i in 0..n {
                    data.extend_from_slice(lhs.row(i));
                    data.extend_from_slice(rhs.row(i));
                }
                Tensor::new(vec![n, c1 + c2], data)?
            }
            _ => {
                return Err(CoreError::InvalidArgument(format!(
                    "concat axis must be 0 or 1, got {axis}"
                )))
            }
        };
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(Op::Concat(a, b, axis), out, rg))
    }

    /// Contiguous [start, end) slab along `axis` of a rank-2 tensor.
    pub fn slice(&mut self, x: TensorId, axis: usize, start: usize, end: usize) -> Result<TensorId> {
        let v = self.value(x);
        if v.rank() != 2 {
            return Err(CoreError::InvalidArgument(
                "slice expects a rank-2 tensor".into(),
            ));
        }
        let limit = v.shape()[axis.min(1)];
        if axis > 1 || start >= end || end > limit {
            return Err(CoreError::InvalidArgument(format!(
                "slice bounds {start}..{end} on axis {axis} invalid for shape {:?}",
                v.shape()
            )));
        }
        let (n, c) = (v.rows(), v.cols());
        let out = match axis {
            0 => Tensor::new(vec![end - start, c], v.data()[start * c..end * c].to_vec())?,
            _ => {
                let mut data = Vec::with_capacity(n * (end - start));
                for i in 0..n {
                    data.extend_from_slice(&v.row(i)[start..end]);
                }
                Tensor::new(vec![n, end - start], data)?
            }
        };
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Op::Slice(x, axis, start, end), out, rg))
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let v = self.value(x);
        if shape.iter().product::<usize>() != v.numel() {
            return Err(CoreError::ShapeMismatch {
                op: "reshape",
                lhs: v.shape().to_vec(),
                rhs: shape,
            });
        }
        let out = Tensor::new(shape, v.data().to_vec())?;
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Op::Reshape(x), out, rg))
    }

    /// Selects rows of `x` by index; rows may repeat (embedding lookup).
    pub fn gather_rows(&mut self, x: TensorId, indices: Vec<usize>) -> Result<TensorId> {
        let v = self.value(x);
        if v.rank() != 2 {
            return Err(CoreError::InvalidArgument(
                "gather_rows expects a rank-2 tensor".into(),
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= v.rows()) {
            return Err(CoreError::InvalidArgument(format!(
                "gather_rows index {bad} out of range for {} rows",
                v.rows()
            )));
        }
        let c = v.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in &indices {
            data.extend_from_slice(v.row(i));
        }
        let out = Tensor::new(vec![indices.len(), c], data)?;
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Op::GatherRows(x, indices), out, rg))
    }

    /// Repeats each row of `x` as `times` consecutive output rows.
    pub fn repeat_rows(&mut self, x: TensorId, times: usize) -> Result<TensorId> {
        let v = self.value(x);
        if v.rank() != 2 || times == 0 {
            return Err(CoreError::InvalidArgument(
                "repeat_rows expects a rank-2 tensor and times >= 1".into(),
            ));
        }
        let c = v.cols();
        let mut data = Vec::with_capacity(v.numel() * times);
        for i in 0..v.rows() {
            for _ in 0..times {
                data.extend_from_slice(v.row(i));
            }
        }
        let out = Tensor::new(vec![v.rows() * times, c], data)?;
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Op::RepeatRows(x, times), out, rg))
    }

    /// Sums each consecutive block of `block` rows into one output row.
    pub fn sum_row_blocks(&mut self, x: TensorId, block: usize) -> Result<TensorId> {
        let v = self.value(x);
        if v.rank() != 2 || block == 0 || v.rows() % block != 0 {
            return Err(CoreError::InvalidArgument(format!(
                "sum_row_blocks: {} rows not divisible into blocks of {block}",
                v.rows()
            )));
        }
        let (n, c) = (v.rows() / block, v.cols());
        let mut data = vec![0.0; n * c];
        for i in 0..v.rows() {
            let out_row = i / block;
            for j in 0..c {
                data[out_row * c + j] += v.at(i, j);
            }
        }
        let out = Tensor::new(vec![n, c], data)?;
        let rg = self.needs_grad(&[x]);
        let out = self.finite(out, "sum_row_blocks")?;
        Ok(self.push(Op::SumRowBlocks(x, block), out, rg))
    }

    // ── reductions ──

    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.needs_grad(&[x]);
        let out = self.finite(Tensor::scalar(s), "sum")?;
        Ok(self.push(Op::Sum(x), out, rg))
    }

    pub fn mean(&mut self, x: TensorId) -> Result<TensorId> {
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(CoreError::InvalidArgument("mean of empty tensor".into()));
        }
        let s: f64 = v.data().iter().sum();
        let m = s / v.numel() as f64;
        let rg = self.needs_grad(&[x]);
        let out = self.finite(Tensor::scalar(m), "mean")?;
        Ok(self.push(Op::Mean(x), out, rg))
    }

    // ── elementwise nonlinearities ──

    fn unary(
        &mut self,
        op_name: &'static str,
        x: TensorId,
        f: impl Fn(f64) -> f64,
        make: impl Fn(TensorId) -> Op,
    ) -> Result<TensorId> {
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            *o = f(*o);
        }
        let rg = self.needs_grad(&[x]);
        let out = self.finite(out, op_name)?;
        Ok(self.push(make(x), out, rg))
    }

    pub fn exp(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary("exp", x, f64::exp, Op::Exp)
    }

    pub fn log(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary("log", x, f64::ln, Op::Log)
    }

    pub fn tanh(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary("tanh", x, f64::tanh, Op::Tanh)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary("sigmoid", x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid)
    }

    pub fn clamp(&mut self, x: TensorId, lo: f64, hi: f64) -> Result<TensorId> {
        if !(lo < hi) {
            return Err(CoreError::InvalidArgument(format!(
                "clamp bounds inverted: {lo} >= {hi}"
            )));
        }
        self.unary("clamp", x, |v| v.clamp(lo, hi), |id| Op::Clamp(id, lo, hi))
    }

    // ── softmax family ──

    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let v = self.value(x);
        let dims = axis_layout(v, axis, "softmax")?;
        let mut out = v.clone();
        for g in 0..dims.groups {
            let idx = |p: usize| dims.flat(g, p);
            let m = (0..dims.len)
                .map(|p| out.data()[idx(p)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for p in 0..dims.len {
                let e = (out.data()[idx(p)] - m).exp();
                out.data_mut()[idx(p)] = e;
                s += e;
            }
            for p in 0..dims.len {
                out.data_mut()[idx(p)] /= s;
            }
        }
        let rg = self.needs_grad(&[x]);
        let out = self.finite(out, "softmax")?;
        Ok(self.push(Op::Softmax(x, axis), out, rg))
    }

    pub fn log_softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let v = self.value(x);
        let dims = axis_layout(v, axis, "log_softmax")?;
        let mut out = v.clone();
        for g in 0..dims.groups {
            let idx = |p: usize| dims.flat(g, p);
            let m = (0..dims.len)
                .map(|p| out.data()[idx(p)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for p in 0..dims.len {
                s += (out.data()[idx(p)] - m).exp();
            }
            let lse = m + s.ln();
            for p in 0..dims.len {
                out.data_mut()[idx(p)] -= lse;
            }
        }
        let rg = self.needs_grad(&[x]);
        let out = self.finite(out, "log_softmax")?;
        Ok(self.push(Op::LogSoftmax(x, axis), out, rg))
    }

    // ── pairwise distances ──

    /// Squared Euclidean distances between all row pairs: out[i][j] = |a_i - b_j|^2.
    pub fn sqdist(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (lhs, rhs) = (self.value(a), self.value(b));
        if lhs.rank() != 2 || rhs.rank() != 2 || lhs.cols() != rhs.cols() {
            return Err(CoreError::ShapeMismatch {
                op: "sqdist",
                lhs: lhs.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let (n, m, d) = (lhs.rows(), rhs.rows(), lhs.cols());
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            let ri = lhs.row(i);
            for j in 0..m {
                let rj = rhs.row(j);
                let mut acc = 0.0;
                for k in 0..d {
                    let diff = ri[k] - rj[k];
                    acc += diff * diff;
                }
                data.push(acc);
            }
        }
        let out = Tensor::new(vec![n, m], data)?;
        let rg = self.needs_grad(&[a, b]);
        let out = self.finite(out, "sqdist")?;
        Ok(self.push(Op::SqDist(a, b), out, rg))
    }

    // ── gradient reversal ──

    /// Identity forward; backward emits -lambda * upstream.
    pub fn grl(&mut self, x: TensorId, lambda: f64) -> Result<TensorId> {
        if lambda < 0.0 || !lambda.is_finite() {
            return Err(CoreError::InvalidArgument(format!(
                "gradient reversal coefficient must be nonnegative, got {lambda}"
            )));
        }
        let out = self.value(x).clone();
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Op::Grl(x, lambda), out, rg))
    }

    // ── backward ──

    /// Populates gradient buffers of every node `loss` depends on.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(CoreError::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(CoreError::InvalidArgument(
                "loss does not depend on any differentiable leaf".into(),
            ));
        }
        let shape = self.value(loss).shape().to_vec();
        self.nodes[loss.0].grad = Some(Tensor::new(shape, vec![1.0])?);

        for i in (0..=loss.0).rev() {
            let g = match self.nodes[i].grad.take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            self.backprop_node(i, &op, &g)?;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: TensorId, contribution: Tensor) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(contribution.data()) {
                    *a += b;
                }
            }
            None => node.grad = Some(contribution),
        }
    }

    /// Reduces an lhs-shaped gradient back to the rhs shape of a broadcast op.
    fn reduce_to_rhs(&self, g: &Tensor, rhs: TensorId, bc: Broadcast) -> Tensor {
        let rshape = self.value(rhs).shape().to_vec();
        let cols = g.cols();
        let mut out = Tensor::zeros(rshape);
        match bc {
            Broadcast::Same => {
                out.data_mut().copy_from_slice(g.data());
            }
            Broadcast::ScalarRhs => {
                out.data_mut()[0] = g.data().iter().sum();
            }
            Broadcast::RowVec => {
                for (i, v) in g.data().iter().enumerate() {
                    out.data_mut()[i % cols] += v;
                }
            }
            Broadcast::ColVec => {
                for (i, v) in g.data().iter().enumerate() {
                    out.data_mut()[i / cols] += v;
                }
            }
        }
        out
    }

    fn backprop_node(&mut self, node_idx: usize, op: &Op, g: &Tensor) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b, bc) => {
                self.accumulate(a, g.clone());
                let gb = self.reduce_to_rhs(g, b, bc);
                self.accumulate(b, gb);
            }
            Op::Sub(a, b, bc) => {
                self.accumulate(a, g.clone());
                let mut gb = self.reduce_to_rhs(g, b, bc);
                for v in gb.data_mut() {
                    *v = -*v;
                }
                self.accumulate(b, gb);
            }
            Op::Mul(a, b, bc) => {
                let cols = self.value(a).cols();
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                let mut ga = Tensor::zeros(self.value(a).shape().to_vec());
                let mut gb = Tensor::zeros(self.value(b).shape().to_vec());
                match bc {
                    Broadcast::Same => {
                        for i in 0..g.numel() {
                            ga.data_mut()[i] = g.data()[i] * bv[i];
                            gb.data_mut()[i] = g.data()[i] * av[i];
                        }
                    }
                    Broadcast::ScalarRhs => {
                        let r = bv[0];
                        let mut acc = 0.0;
                        for i in 0..g.numel() {
                            ga.data_mut()[i] = g.data()[i] * r;
                            acc += g.data()[i] * av[i];
                        }
                        gb.data_mut()[0] = acc;
                    }
                    Broadcast::RowVec => {
                        for i in 0..g.numel() {
                            ga.data_mut()[i] = g.data()[i] * bv[i % cols];
                            gb.data_mut()[i % cols] += g.data()[i] * av[i];
                        }
                    }
                    Broadcast::ColVec => {
                        for i in 0..g.numel() {
                            ga.data_mut()[i] = g.data()[i] * bv[i / cols];
                            gb.data_mut()[i / cols] += g.data()[i] * av[i];
                        }
                    }
                }
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Affine(x, a) => {
                let mut gx = g.clone();
                for v in gx.data_mut() {
                    *v *= a;
                }
                self.accumulate(x, gx);
            }
            Op::Matmul(a, b) => {
                let ga = mm_tb(g, self.value(b));
                let gb = mm_ta(self.value(a), g);
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::MatmulTB(a, b) => {
                let ga = mm(g, self.value(b));
                let gb = mm_ta(g, self.value(a));
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Concat(a, b, axis) => {
                let (la, lb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
                let mut ga = Tensor::zeros(la.clone());
                let mut gb = Tensor::zeros(lb.clone());
                match axis {
                    0 => {
                        let split = la[0] * la[1];
                        ga.data_mut().copy_from_slice(&g.data()[..split]);
                        gb.data_mut().copy_from_slice(&g.data()[split..]);
                    }
                    _ => {
                        let (n, c1, c2) = (la[0], la[1], lb[1]);
                        for i in 0..n {
                            let row = &g.row(i);
                            ga.data_mut()[i * c1..(i + 1) * c1].copy_from_slice(&row[..c1]);
                            gb.data_mut()[i * c2..(i + 1) * c2].copy_from_slice(&row[c1..]);
                        }
                    }
                }
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Slice(x, axis, start, end) => {
                let shape = self.value(x).shape().to_vec();
                let (n, c) = (shape[0], shape[1]);
                let mut gx = Tensor::zeros(shape);
                match axis {
                    0 => {
                        gx.data_mut()[start * c..end * c].copy_from_slice(g.data());
                    }
                    _ => {
                        let w = end - start;
                        for i in 0..n {
                            let dst = &mut gx.data_mut()[i * c + start..i * c + end];
                            dst.copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                        }
                    }
                }
                self.accumulate(x, gx);
            }
            Op::Sum(x) => {
                let s = g.item();
                let shape = self.value(x).shape().to_vec();
                let n = self.value(x).numel();
                self.accumulate(x, Tensor::new(shape, vec![s; n])?);
            }
            Op::Mean(x) => {
                let n = self.value(x).numel();
                let s = g.item() / n as f64;
                let shape = self.value(x).shape().to_vec();
                self.accumulate(x, Tensor::new(shape, vec![s; n])?);
            }
            Op::Exp(x) => {
                let y = &self.nodes[node_idx].value;
                let mut gx = g.clone();
                for (v, yv) in gx.data_mut().iter_mut().zip(y.data()) {
                    *v *= yv;
                }
                self.accumulate(x, gx);
            }
            Op::Log(x) => {
                let xv = self.value(x);
                let mut gx = g.clone();
                for (v, x0) in gx.data_mut().iter_mut().zip(xv.data()) {
                    *v /= x0;
                }
                self.accumulate(x, gx);
            }
            Op::Tanh(x) => {
                let y = &self.nodes[node_idx].value;
                let mut gx = g.clone();
                for (v, yv) in gx.data_mut().iter_mut().zip(y.data()) {
                    *v *= 1.0 - yv * yv;
                }
                self.accumulate(x, gx);
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[node_idx].value;
                let mut gx = g.clone();
                for (v, yv) in gx.data_mut().iter_mut().zip(y.data()) {
                    *v *= yv * (1.0 - yv);
                }
                self.accumulate(x, gx);
            }
            Op::Softmax(x, axis) => {
                let y = self.nodes[node_idx].value.clone();
                let dims = axis_layout(&y, axis, "softmax")?;
                let mut gx = Tensor::zeros(y.shape().to_vec());
                for grp in 0..dims.groups {
                    let idx = |p: usize| dims.flat(grp, p);
                    let mut dot = 0.0;
                    for p in 0..dims.len {
                        dot += g.data()[idx(p)] * y.data()[idx(p)];
                    }
                    for p in 0..dims.len {
                        gx.data_mut()[idx(p)] = y.data()[idx(p)] * (g.data()[idx(p)] - dot);
                    }
                }
                self.accumulate(x, gx);
            }
            Op::LogSoftmax(x, axis) => {
                let y = self.nodes[node_idx].value.clone();
                let dims = axis_layout(&y, axis, "log_softmax")?;
                let mut gx = Tensor::zeros(y.shape().to_vec());
                for grp in 0..dims.groups {
                    let idx = |p: usize| dims.flat(grp, p);
                    let mut gsum = 0.0;
                    for p in 0..dims.len {
                        gsum += g.data()[idx(p)];
                    }
                    for p in 0..dims.len {
                        gx.data_mut()[idx(p)] =
                            g.data()[idx(p)] - y.data()[idx(p)].exp() * gsum;
                    }
                }
                self.accumulate(x, gx);
            }
            Op::SqDist(a, b) => {
                let (av, bv) = (self.value(a).clone(), self.value(b).clone());
                let (n, m, d) = (av.rows(), bv.rows(), av.cols());
                let mut ga = Tensor::zeros(av.shape().to_vec());
                let mut gb = Tensor::zeros(bv.shape().to_vec());
                for i in 0..n {
                    for j in 0..m {
                        let w = 2.0 * g.at(i, j);
                        if w == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            let diff = av.at(i, k) - bv.at(j, k);
                            ga.data_mut()[i * d + k] += w * diff;
                            gb.data_mut()[j * d + k] -= w * diff;
                        }
                    }
                }
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Grl(x, lambda) => {
                let mut gx = g.clone();
                for v in gx.data_mut() {
                    *v = -lambda * *v;
                }
                self.accumulate(x, gx);
            }
            Op::Reshape(x) => {
                let shape = self.value(x).shape().to_vec();
                self.accumulate(x, Tensor::new(shape, g.data().to_vec())?);
            }
            Op::GatherRows(x, ref indices) => {
                let shape = self.value(x).shape().to_vec();
                let c = shape[1];
                let mut gx = Tensor::zeros(shape);
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..c {
                        gx.data_mut()[i * c + j] += g.at(r, j);
                    }
                }
                self.accumulate(x, gx);
            }
            Op::RepeatRows(x, times) => {
                let shape = self.value(x).shape().to_vec();
                let c = shape[1];
                let mut gx = Tensor::zeros(shape);
                for r in 0..g.rows() {
                    let src = r / times;
                    for j in 0..c {
                        gx.data_mut()[src * c + j] += g.at(r, j);
                    }
                }
                self.accumulate(x, gx);
            }
            Op::SumRowBlocks(x, block) => {
                let shape = self.value(x).shape().to_vec();
                let c = shape[1];
                let mut gx = Tensor::zeros(shape.clone());
                for r in 0..shape[0] {
                    let src = r / block;
                    for j in 0..c {
                        gx.data_mut()[r * c + j] = g.at(src, j);
                    }
                }
                self.accumulate(x, gx);
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(x);
                let mut gx = g.clone();
                for (v, x0) in gx.data_mut().iter_mut().zip(xv.data()) {
                    if !(*x0 > lo && *x0 < hi) {
                        *v = 0.0;
                    }
                }
                self.accumulate(x, gx);
            }
        }
        Ok(())
    }
}

/// Group layout for softmax-style ops along one axis.
struct AxisLayout {
    groups: usize,
    len: usize,
    stride: usize,
    group_stride: usize,
}

impl AxisLayout {
    fn flat(&self, group: usize, pos: usize) -> usize {
        group * self.group_stride + pos * self.stride
    }
}

fn axis_layout(t: &Tensor, axis: usize, op: &'static str) -> Result<AxisLayout> {
    match (t.rank(), axis) {
        (1, 0) => Ok(AxisLayout {
            groups: 1,
            len: t.numel(),
            stride: 1,
            group_stride: 0,
        }),
        (2, 1) => Ok(AxisLayout {
            groups: t.rows(),
            len: t.cols(),
            stride: 1,
            group_stride: t.cols(),
        }),
        (2, 0) => Ok(AxisLayout {
            groups: t.cols(),
            len: t.rows(),
            stride: t.cols(),
            group_stride: 1,
        }),
        _ => Err(CoreError::InvalidArgument(format!(
            "{op}: axis {axis} invalid for rank-{} tensor",
            t.rank()
        ))),
    }
}

// ── raw matrix products (shared by forward and backward) ──

fn mm(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, m, p) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(vec![n, p]);
    for i in 0..n {
        let ar = a.row(i);
        let or = &mut out.data_mut()[i * p..(i + 1) * p];
        for (k, &av) in ar.iter().enumerate().take(m) {
            let br = &b.data()[k * p..(k + 1) * p];
            for j in 0..p {
                or[j] += av * br[j];
            }
        }
    }
    out
}

/// a @ b^T with b stored [p x m]: rows of both operands are contiguous.
fn mm_tb(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, m, p) = (a.rows(), a.cols(), b.rows());
    let mut out = Tensor::zeros(vec![n, p]);
    for i in 0..n {
        let ar = a.row(i);
        for j in 0..p {
            let br = b.row(j);
            let mut acc = 0.0;
            for k in 0..m {
                acc += ar[k] * br[k];
            }
            out.data_mut()[i * p + j] = acc;
        }
    }
    out
}

/// a^T @ b with a stored [n x m]: out[k][j] = sum_i a[i][k] b[i][j].
fn mm_ta(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, m, p) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(vec![m, p]);
    for i in 0..n {
        let ar = a.row(i);
        let br = &b.data()[i * p..(i + 1) * p];
        for (k, &av) in ar.iter().enumerate().take(m) {
            let or = &mut out.data_mut()[k * p..(k + 1) * p];
            for j in 0..p {
                or[j] += av * br[j];
            }
        }
    }
    out
}

// ── finite-difference checking ──

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|)
/// for a scalar-valued graph function of several leaf tensors.
pub fn grad_check_multi<F>(f: F, points: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[TensorId]) -> Result<TensorId>,
{
    if step <= 0.0 {
        return Err(CoreError::InvalidArgument("step must be positive".into()));
    }
    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<TensorId> = pts.iter().map(|p| g.leaf(p.clone())).collect();
        let out = f(&mut g, &ids)?;
        if g.value(out).numel() != 1 {
            return Err(CoreError::InvalidArgument(
                "grad_check requires a scalar-valued function".into(),
            ));
        }
        Ok(g.value(out).item())
    };

    let mut graph = Graph::new();
    let ids: Vec<TensorId> = points.iter().map(|p| graph.leaf(p.clone())).collect();
    let out = f(&mut graph, &ids)?;
    if graph.value(out).numel() != 1 {
        return Err(CoreError::InvalidArgument(
            "grad_check requires a scalar-valued function".into(),
        ));
    }
    graph.backward(out)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(points)
        .map(|(id, p)| {
            graph
                .grad(*id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))
        })
        .collect();

    let mut worst = 0.0_f64;
    let mut work: Vec<Tensor> = points.to_vec();
    for (pi, point) in points.iter().enumerate() {
        for ci in 0..point.numel() {
            let orig = point.data()[ci];
            work[pi].data_mut()[ci] = orig + step;
            let up = eval(&work)?;
            work[pi].data_mut()[ci] = orig - step;
            let down = eval(&work)?;
            work[pi].data_mut()[ci] = orig;
            let fd = (up - down) / (2.0 * step);
            let a = analytic[pi].data()[ci];
            let err = (a - fd).abs() / a.abs().max(1.0);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

/// Single-tensor form of [`grad_check_multi`].
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, TensorId) -> Result<TensorId>,
{
    grad_check_multi(|g, ids| f(g, ids[0]), std::slice::from_ref(point), step)
}
