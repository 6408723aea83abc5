//! Reverse-mode automatic differentiation over a persistent expression graph.
//!
//! The graph is an append-only arena: a node's inputs always have smaller
//! indices, so the arena order is a topological order and every traversal
//! below walks plain index ranges. Differentiation constructs new nodes for
//! the backward pass instead of accumulating numbers, which is what makes
//! first-order gradients differentiable a second time: the gradient of a
//! gradient-matching loss with respect to dummy inputs is an ordinary
//! subgraph like any other.
//!
//! Evaluation is cached per "epoch": writing to any leaf bumps the epoch and
//! invalidates all interior values, so repeated evaluation after a leaf
//! update recomputes exactly the affected subgraph in a fixed order.

use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_dims, Tensor};

/// Handle to a node in a [`Graph`] arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// A leaf node with mutable data and an accumulated gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variable {
    id: NodeId,
}

impl Variable {
    pub fn id(&self) -> NodeId {
        self.id
    }
}

/// Geometry of a sliding-window patch extraction (valid padding).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h - self.kh) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w - self.kw) / self.stride + 1
    }
    pub fn cols(&self) -> usize {
        self.out_h() * self.out_w()
    }
    pub fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }
}

/// Operation kinds. The public builders cover the documented set; the
/// backward-only kinds (`GtZeroMask`, `Softmax`, `Unfold`, `Fold`) exist
/// because backward rules must themselves be graph nodes for the second
/// differentiation pass.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Leaf { requires_grad: bool },
    Add(NodeId, NodeId),
    Subtract(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul { a: NodeId, b: NodeId, trans_a: bool, trans_b: bool },
    Reshape(NodeId),
    Sum(NodeId),
    ScalarPower(NodeId, f64),
    Sigmoid(NodeId),
    Relu(NodeId),
    GtZeroMask(NodeId),
    Softmax(NodeId),
    SoftmaxLog(NodeId),
    Unfold { input: NodeId, geom: ConvGeom },
    Fold { grad: NodeId, geom: ConvGeom },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Add(..) => "add",
            Op::Subtract(..) => "subtract",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul { .. } => "matmul",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::ScalarPower(..) => "scalar-power",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::GtZeroMask(..) => "gt-zero-mask",
            Op::Softmax(..) => "softmax",
            Op::SoftmaxLog(..) => "softmax-log",
            Op::Unfold { .. } => "unfold",
            Op::Fold { .. } => "fold",
        }
    }

    fn inputs(&self, out: &mut Vec<NodeId>) {
        out.clear();
        match *self {
            Op::Leaf { .. } => {}
            Op::Add(a, b) | Op::Subtract(a, b) | Op::Mul(a, b) => {
                out.push(a);
                out.push(b);
            }
            Op::MatMul { a, b, .. } => {
                out.push(a);
                out.push(b);
            }
            Op::Scale(a, _)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::ScalarPower(a, _)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::GtZeroMask(a)
            | Op::Softmax(a)
            | Op::SoftmaxLog(a) => out.push(a),
            Op::Unfold { input, .. } => out.push(input),
            Op::Fold { grad, .. } => out.push(grad),
        }
    }
}

struct NodeData {
    op: Op,
    shape: Vec<usize>,
    value: Option<Tensor>,
    valid_at: u64,
    needs_grad: bool,
    grad: Option<Tensor>,
}

/// Append-only computation graph with cached evaluation.
pub struct Graph {
    nodes: Vec<NodeData>,
    epoch: u64,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), epoch: 1 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Option<Tensor>) -> NodeId {
        let needs_grad = match op {
            Op::Leaf { requires_grad } => requires_grad,
            // Piecewise-constant: carries values but never gradient.
            Op::GtZeroMask(_) => false,
            _ => {
                let mut ins = Vec::new();
                op.inputs(&mut ins);
                ins.iter().any(|i| self.nodes[i.0].needs_grad)
            }
        };
        let id = NodeId(self.nodes.len());
        self.nodes.push(NodeData { op, shape, value, valid_at: 0, needs_grad, grad: None });
        id
    }

    // ---- leaves ------------------------------------------------------

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        let shape = value.shape().to_vec();
        let grad = if requires_grad { Some(Tensor::zeros(shape.clone())) } else { None };
        let id = self.push(Op::Leaf { requires_grad }, shape, Some(value));
        self.nodes[id.0].grad = grad;
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Variable {
        Variable { id: self.leaf(value, true) }
    }

    /// Overwrite a leaf's data. Invalidates every cached interior value.
    pub fn set_leaf(&mut self, id: NodeId, data: &[f64]) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Leaf { .. }) {
            return Err(Error::invalid("set_leaf target is not a leaf"));
        }
        let value = node.value.as_mut().expect("leaf always has a value");
        if value.numel() != data.len() {
            return Err(Error::Shape {
                op: "leaf",
                detail: format!("leaf holds {} elements, got {}", value.numel(), data.len()),
            });
        }
        value.data_mut().copy_from_slice(data);
        self.epoch += 1;
        Ok(())
    }

    /// Borrow a leaf's current data.
    pub fn leaf_data(&self, id: NodeId) -> &Tensor {
        self.nodes[id.0].value.as_ref().expect("leaf always has a value")
    }

    // ---- builders ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(Error::Shape { op, detail: format!("{:?} vs {:?}", sa, sb) });
        }
        Ok(sa.clone())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), shape, None))
    }

    pub fn subtract(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("subtract", a, b)?;
        Ok(self.push(Op::Subtract(a, b), shape, None))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), shape, None))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Scale(a, factor), shape, None))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_t(a, b, false, false)
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId, trans_a: bool, trans_b: bool) -> Result<NodeId> {
        let (m, _, n) = matmul_dims(&self.nodes[a.0].shape, &self.nodes[b.0].shape, trans_a, trans_b)?;
        Ok(self.push(Op::MatMul { a, b, trans_a, trans_b }, vec![m, n], None))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let from: usize = self.nodes[a.0].shape.iter().product();
        let to: usize = shape.iter().product();
        if from != to {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("{:?} has {} elements, target {:?} has {}", self.nodes[a.0].shape, from, shape, to),
            });
        }
        Ok(self.push(Op::Reshape(a), shape, None))
    }

    /// Sum of all elements; result is rank-0.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        Ok(self.push(Op::Sum(a), vec![], None))
    }

    /// Elementwise `x^c` with constant exponent.
    pub fn scalar_power(&mut self, a: NodeId, exponent: f64) -> Result<NodeId> {
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::ScalarPower(a, exponent), shape, None))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Sigmoid(a), shape, None))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Relu(a), shape, None))
    }

    /// Softmax over all elements of the node.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Softmax(a), shape, None))
    }

    /// Log-softmax over all elements of the node.
    pub fn softmax_log(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::SoftmaxLog(a), shape, None))
    }

    fn conv_geom(&self, x: NodeId, kh: usize, kw: usize, stride: usize) -> Result<ConvGeom> {
        let xs = &self.nodes[x.0].shape;
        if xs.len() != 3 {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!("input must be (channels, height, width), got {:?}", xs),
            });
        }
        let geom = ConvGeom { c: xs[0], h: xs[1], w: xs[2], kh, kw, stride };
        if stride == 0 || kh == 0 || kw == 0 || kh > geom.h || kw > geom.w {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!("kernel {}x{} stride {} does not fit input {:?}", kh, kw, stride, xs),
            });
        }
        Ok(geom)
    }

    fn unfold(&mut self, x: NodeId, geom: ConvGeom) -> NodeId {
        self.push(Op::Unfold { input: x, geom }, vec![geom.rows(), geom.cols()], None)
    }

    fn fold(&mut self, g: NodeId, geom: ConvGeom) -> NodeId {
        self.push(Op::Fold { grad: g, geom }, vec![geom.c, geom.h, geom.w], None)
    }

    /// Valid-padding 2-D convolution with bias, built as a patch-matrix
    /// multiplication so every piece of its backward pass is itself a node.
    ///
    /// `x`: (C_in, H, W), `kernel`: (C_out, C_in, kh, kw), `bias`: (C_out).
    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, bias: NodeId, stride: usize) -> Result<NodeId> {
        let ks = self.nodes[kernel.0].shape.clone();
        if ks.len() != 4 {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!("kernel must be (out, in, kh, kw), got {:?}", ks),
            });
        }
        let (out_c, in_c, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        let geom = self.conv_geom(x, kh, kw, stride)?;
        if in_c != geom.c {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!("kernel expects {} input channels, input has {}", in_c, geom.c),
            });
        }
        if self.nodes[bias.0].shape != [out_c] {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!("bias must be ({},), got {:?}", out_c, self.nodes[bias.0].shape),
            });
        }
        let cols = self.unfold(x, geom);
        let wmat = self.reshape(kernel, vec![out_c, geom.rows()])?;
        let prod = self.matmul(wmat, cols)?;
        let bcol = self.reshape(bias, vec![out_c, 1])?;
        let ones = self.constant(Tensor::full(vec![1, geom.cols()], 1.0));
        let bmat = self.matmul(bcol, ones)?;
        let with_bias = self.add(prod, bmat)?;
        self.reshape(with_bias, vec![out_c, geom.out_h(), geom.out_w()])
    }

    /// Spread a rank-0 node over `shape` (adjoint of [`Graph::sum`]).
    fn broadcast_scalar(&mut self, s: NodeId, shape: &[usize]) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        let row = self.reshape(s, vec![1, 1])?;
        let ones = self.constant(Tensor::full(vec![n, 1], 1.0));
        let col = self.matmul(ones, row)?;
        self.reshape(col, shape.to_vec())
    }

    // ---- evaluation ----------------------------------------------------

    fn is_valid(&self, id: NodeId) -> bool {
        let node = &self.nodes[id.0];
        matches!(node.op, Op::Leaf { .. }) || (node.valid_at == self.epoch && node.value.is_some())
    }

    fn ensure_values(&mut self, roots: &[NodeId]) -> Result<()> {
        let mut stack: Vec<(NodeId, bool)> = Vec::new();
        let mut ins = Vec::new();
        for &root in roots {
            if self.is_valid(root) {
                continue;
            }
            stack.push((root, false));
            while let Some((id, expanded)) = stack.pop() {
                if self.is_valid(id) {
                    continue;
                }
                if expanded {
                    let value = compute_value(&self.nodes, id)?;
                    let node = &mut self.nodes[id.0];
                    node.value = Some(value);
                    node.valid_at = self.epoch;
                } else {
                    stack.push((id, true));
                    self.nodes[id.0].op.inputs(&mut ins);
                    for &input in ins.iter().rev() {
                        if !self.is_valid(input) {
                            stack.push((input, false));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Forward value of `root`. Repeated calls with unchanged leaves return
    /// the identical cached tensor.
    pub fn evaluate(&mut self, root: NodeId) -> Result<Tensor> {
        self.ensure_values(&[root])?;
        Ok(self.nodes[root.0].value.clone().expect("just computed"))
    }

    /// Evaluate several roots sharing one traversal, then read values with
    /// [`Graph::value`].
    pub fn eval_many(&mut self, roots: &[NodeId]) -> Result<()> {
        self.ensure_values(roots)
    }

    /// Cached value of a node; `None` when stale or never computed.
    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        if self.is_valid(id) {
            self.nodes[id.0].value.as_ref()
        } else {
            None
        }
    }

    // ---- differentiation ----------------------------------------------

    /// Build gradient nodes of a scalar `output` with respect to each node in
    /// `wrt`, in input order. With `create_graph` the returned nodes remain
    /// differentiable; otherwise they are detached constants holding the
    /// current numeric gradient.
    pub fn differentiate(&mut self, output: NodeId, wrt: &[NodeId], create_graph: bool) -> Result<Vec<NodeId>> {
        let ids = self.build_grad_nodes(output, wrt)?;
        if create_graph {
            return Ok(ids);
        }
        self.ensure_values(&ids)?;
        let mut detached = Vec::with_capacity(ids.len());
        for id in ids {
            let value = self.nodes[id.0].value.clone().expect("just computed");
            detached.push(self.constant(value));
        }
        Ok(detached)
    }

    fn build_grad_nodes(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        let out_shape = self.nodes[output.0].shape.clone();
        if out_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarOutput { shape: out_shape });
        }
        let boundary = self.nodes.len();

        // Reachability from the output down to leaves.
        let mut reach = vec![false; boundary];
        let mut stack = vec![output];
        let mut ins = Vec::new();
        while let Some(id) = stack.pop() {
            if reach[id.0] {
                continue;
            }
            reach[id.0] = true;
            self.nodes[id.0].op.inputs(&mut ins);
            for &i in &ins {
                if !reach[i.0] {
                    stack.push(i);
                }
            }
        }

        let mut adjoint: Vec<Option<NodeId>> = vec![None; boundary];
        adjoint[output.0] = Some(self.constant(Tensor::full(out_shape, 1.0)));

        // Arena index order is topological, so a reverse sweep visits every
        // consumer before its inputs; contributions accumulate in that fixed
        // order.
        for idx in (0..boundary).rev() {
            if !reach[idx] || !self.nodes[idx].needs_grad {
                continue;
            }
            let upstream = match adjoint[idx] {
                Some(a) => a,
                None => continue,
            };
            let op = self.nodes[idx].op;
            match op {
                Op::Leaf { .. } => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut adjoint, a, upstream)?;
                    self.accumulate(&mut adjoint, b, upstream)?;
                }
                Op::Subtract(a, b) => {
                    self.accumulate(&mut adjoint, a, upstream)?;
                    if self.nodes[b.0].needs_grad {
                        let neg = self.scale(upstream, -1.0)?;
                        self.accumulate(&mut adjoint, b, neg)?;
                    }
                }
                Op::Mul(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        let c = self.mul(upstream, b)?;
                        self.accumulate(&mut adjoint, a, c)?;
                    }
                    if self.nodes[b.0].needs_grad {
                        let c = self.mul(upstream, a)?;
                        self.accumulate(&mut adjoint, b, c)?;
                    }
                }
                Op::Scale(a, factor) => {
                    if self.nodes[a.0].needs_grad {
                        let c = self.scale(upstream, factor)?;
                        self.accumulate(&mut adjoint, a, c)?;
                    }
                }
                Op::MatMul { a, b, trans_a, trans_b } => {
                    if self.nodes[a.0].needs_grad {
                        let c = match (trans_a, trans_b) {
                            (false, false) => self.matmul_t(upstream, b, false, true)?,
                            (true, false) => self.matmul_t(b, upstream, false, true)?,
                            (false, true) => self.matmul_t(upstream, b, false, false)?,
                            (true, true) => self.matmul_t(b, upstream, true, true)?,
                        };
                        self.accumulate(&mut adjoint, a, c)?;
                    }
                    if self.nodes[b.0].needs_grad {
                        let c = match (trans_a, trans_b) {
                            (false, false) => self.matmul_t(a, upstream, true, false)?,
                            (true, false) => self.matmul_t(a, upstream, false, false)?,
                            (false, true) => self.matmul_t(upstream, a, true, false)?,
                            (true, true) => self.matmul_t(upstream, a, true, true)?,
                        };
                        self.accumulate(&mut adjoint, b, c)?;
                    }
                }
                Op::Reshape(a) => {
                    if self.nodes[a.0].needs_grad {
                        let target = self.nodes[a.0].shape.clone();
                        let c = self.reshape(upstream, target)?;
                        self.accumulate(&mut adjoint, a, c)?;
                    }
                }
                Op::Sum(a) => {
                    if self.nodes[a.0].needs_grad {
                        let target = self.nodes[a.0].shape.clone();
                        let c = self.broadcast_scalar(upstream, &target)?;
                        self.accumulate(&mut adjoint, a, c)?;
                    }
                }
                Op::ScalarPower(a, exponent) => {
                    if self.nodes[a.0].needs_grad {
                        let lower = self.scalar_power(a, exponent - 1.0)?;
                        let prod = self.mul(lower, upstream)?;
                        let c = self.scale(prod, exponent)?;
                        self.accumulate(&mut adjoint, a, c)?;
                    }
                }
                Op::Sigmoid(a) => {
                    if self.nodes[a.0].needs_grad {
                        let y = NodeId(idx);
                        let ones = self.constant(Tensor::full(self.nodes[idx].shape.clone(), 1.0));
                        let one_minus = self.subtract(ones, y)?;
                        let dydx = self.mul(y, one_minus)?;
                        let c = self.mul(upstream, dydx)?;
                        self.accumulate(&mut adjoint, a, c)?;
                    }
                }
                Op::Relu(a) => {
                    if self.nodes[a.0].needs_grad {
                        let shape = self.nodes[a.0].shape.clone();
                        let mask = self.push(Op::GtZeroMask(a), shape, None);
                        let c = self.mul(upstream, mask)?;
                        self.accumulate(&mut adjoint, a, c)?;
                    }
                }
                Op::GtZeroMask(_) => {}
                Op::Softmax(a) => {
                    if self.nodes[a.0].needs_grad {
                        let s = NodeId(idx);
                        let su = self.mul(s, upstream)?;
                        let inner = self.sum(su)?;
                        let spread = self.broadcast_scalar(inner, &self.nodes[a.0].shape.clone())?;
                        let centered = self.subtract(upstream, spread)?;
                        let c = self.mul(s, centered)?;
                        self.accumulate(&mut adjoint, a, c)?;
                    }
                }
                Op::SoftmaxLog(a) => {
                    if self.nodes[a.0].needs_grad {
                        let s = self.softmax(a)?;
                        let total = self.sum(upstream)?;
                        let spread = self.broadcast_scalar(total, &self.nodes[a.0].shape.clone())?;
                        let sg = self.mul(s, spread)?;
                        let c = self.subtract(upstream, sg)?;
                        self.accumulate(&mut adjoint, a, c)?;
                    }
                }
                Op::Unfold { input, geom } => {
                    if self.nodes[input.0].needs_grad {
                        let c = self.fold(upstream, geom);
                        self.accumulate(&mut adjoint, input, c)?;
                    }
                }
                Op::Fold { grad, geom } => {
                    if self.nodes[grad.0].needs_grad {
                        let c = self.unfold(upstream, geom);
                        self.accumulate(&mut adjoint, grad, c)?;
                    }
                }
            }
        }

        let mut out = Vec::with_capacity(wrt.len());
        for &w in wrt {
            match adjoint.get(w.0).copied().flatten() {
                Some(id) => out.push(id),
                None => {
                    let shape = self.nodes[w.0].shape.clone();
                    out.push(self.constant(Tensor::zeros(shape)));
                }
            }
        }
        Ok(out)
    }

    fn accumulate(&mut self, adjoint: &mut [Option<NodeId>], target: NodeId, contribution: NodeId) -> Result<()> {
        if !self.nodes[target.0].needs_grad {
            return Ok(());
        }
        adjoint[target.0] = Some(match adjoint[target.0] {
            Some(existing) => self.add(existing, contribution)?,
            None => contribution,
        });
        Ok(())
    }

    // ---- variable gradient accumulation --------------------------------

    /// Numeric backward pass: accumulates d(output)/d(leaf) into every
    /// `requires_grad` leaf's `grad` buffer.
    pub fn backward(&mut self, output: NodeId) -> Result<()> {
        let vars: Vec<NodeId> = (0..self.nodes.len())
            .filter(|&i| matches!(self.nodes[i].op, Op::Leaf { requires_grad: true }))
            .map(NodeId)
            .collect();
        let grad_ids = self.build_grad_nodes(output, &vars)?;
        self.ensure_values(&grad_ids)?;
        for (var, gid) in vars.iter().zip(grad_ids.iter()) {
            let add = self.nodes[gid.0].value.clone().expect("just computed");
            let slot = self.nodes[var.0].grad.as_mut().expect("requires_grad leaf has a grad buffer");
            for (g, a) in slot.data_mut().iter_mut().zip(add.data().iter()) {
                *g += a;
            }
        }
        Ok(())
    }

    /// Reset every accumulated variable gradient to exactly zero.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    pub fn grad(&self, var: Variable) -> &Tensor {
        self.nodes[var.id().0].grad.as_ref().expect("variable has a grad buffer")
    }
}

fn compute_value(nodes: &[NodeData], id: NodeId) -> Result<Tensor> {
    let node = &nodes[id.0];
    let val = |nid: NodeId| nodes[nid.0].value.as_ref().expect("inputs evaluated first");
    let result = match node.op {
        Op::Leaf { .. } => unreachable!("leaves always hold a value"),
        Op::Add(a, b) => zip_map(val(a), val(b), |x, y| x + y),
        Op::Subtract(a, b) => zip_map(val(a), val(b), |x, y| x - y),
        Op::Mul(a, b) => zip_map(val(a), val(b), |x, y| x * y),
        Op::Scale(a, c) => map(val(a), |x| c * x),
        Op::MatMul { a, b, trans_a, trans_b } => matmul(val(a), val(b), trans_a, trans_b)?,
        Op::Reshape(a) => Tensor::new(node.shape.clone(), val(a).data().to_vec())?,
        Op::Sum(a) => Tensor::scalar(val(a).data().iter().sum()),
        Op::ScalarPower(a, c) => map(val(a), |x| x.powf(c)),
        Op::Sigmoid(a) => map(val(a), |x| 1.0 / (1.0 + (-x).exp())),
        Op::Relu(a) => map(val(a), |x| if x > 0.0 { x } else { 0.0 }),
        Op::GtZeroMask(a) => map(val(a), |x| if x > 0.0 { 1.0 } else { 0.0 }),
        Op::Softmax(a) => softmax_kernel(val(a), false),
        Op::SoftmaxLog(a) => softmax_kernel(val(a), true),
        Op::Unfold { input, geom } => unfold_kernel(val(input), geom),
        Op::Fold { grad, geom } => fold_kernel(val(grad), geom),
    };
    if !result.is_finite() {
        return Err(Error::NonFinite { op: node.op.name() });
    }
    Ok(result)
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.data().iter().map(|&x| f(x)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

fn softmax_kernel(t: &Tensor, log: bool) -> Tensor {
    let max = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = t.data().iter().map(|&x| (x - max).exp()).sum();
    let data: Vec<f64> = if log {
        let lse = max + sum_exp.ln();
        t.data().iter().map(|&x| x - lse).collect()
    } else {
        t.data().iter().map(|&x| (x - max).exp() / sum_exp).collect()
    };
    Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
}

fn unfold_kernel(x: &Tensor, geom: ConvGeom) -> Tensor {
    let (oh, ow, l) = (geom.out_h(), geom.out_w(), geom.cols());
    let mut out = vec![0.0; geom.rows() * l];
    let xd = x.data();
    for c in 0..geom.c {
        for dy in 0..geom.kh {
            for dx in 0..geom.kw {
                let r = (c * geom.kh + dy) * geom.kw + dx;
                for y in 0..oh {
                    let src_row = (c * geom.h + y * geom.stride + dy) * geom.w + dx;
                    for xq in 0..ow {
                        out[r * l + y * ow + xq] = xd[src_row + xq * geom.stride];
                    }
                }
            }
        }
    }
    Tensor::new(vec![geom.rows(), l], out).expect("unfold shape")
}

fn fold_kernel(g: &Tensor, geom: ConvGeom) -> Tensor {
    let (oh, ow, l) = (geom.out_h(), geom.out_w(), geom.cols());
    let mut out = vec![0.0; geom.c * geom.h * geom.w];
    let gd = g.data();
    for c in 0..geom.c {
        for dy in 0..geom.kh {
            for dx in 0..geom.kw {
                let r = (c * geom.kh + dy) * geom.kw + dx;
                for y in 0..oh {
                    let dst_row = (c * geom.h + y * geom.stride + dy) * geom.w + dx;
                    for xq in 0..ow {
                        out[dst_row + xq * geom.stride] += gd[r * l + y * ow + xq];
                    }
                }
            }
        }
    }
    Tensor::new(vec![geom.c, geom.h, geom.w], out).expect("fold shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn scalar_leaf(g: &mut Graph, v: f64) -> NodeId {
        g.leaf(Tensor::scalar(v), true)
    }

    #[test]
    fn scalar_square_evaluates() {
        let mut g = Graph::new();
        let x = scalar_leaf(&mut g, 3.0);
        let f = g.mul(x, x).unwrap();
        assert_eq!(g.evaluate(f).unwrap().item(), 9.0);
    }

    #[test]
    fn identity_reshape_preserves_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap());
        let r = g.reshape(x, vec![2, 2]).unwrap();
        assert_eq!(g.evaluate(r).unwrap().data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(x).unwrap();
        assert_eq!(g.evaluate(s).unwrap().item(), 0.5);
    }

    #[test]
    fn repeated_evaluation_is_bit_identical() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3], vec![0.1, -0.7, 2.3]).unwrap());
        let s = g.sigmoid(x).unwrap();
        let p = g.scalar_power(s, 3.5).unwrap();
        let f = g.sum(p).unwrap();
        let a = g.evaluate(f).unwrap();
        let b = g.evaluate(f).unwrap();
        assert!(a.bitwise_eq(&b));
    }

    #[test]
    fn first_derivative_of_square() {
        let mut g = Graph::new();
        let x = scalar_leaf(&mut g, 3.0);
        let f = g.mul(x, x).unwrap();
        let grads = g.differentiate(f, &[x], false).unwrap();
        assert_eq!(g.evaluate(grads[0]).unwrap().item(), 6.0);
    }

    #[test]
    fn second_derivative_of_square_is_two() {
        let mut g = Graph::new();
        let x = scalar_leaf(&mut g, 3.0);
        let f = g.mul(x, x).unwrap();
        let first = g.differentiate(f, &[x], true).unwrap();
        let second = g.differentiate(first[0], &[x], false).unwrap();
        assert_eq!(g.evaluate(second[0]).unwrap().item(), 2.0);
    }

    #[test]
    fn detached_gradients_do_not_track() {
        let mut g = Graph::new();
        let x = scalar_leaf(&mut g, 3.0);
        let f = g.mul(x, x).unwrap();
        let first = g.differentiate(f, &[x], false).unwrap();
        let second = g.differentiate(first[0], &[x], false).unwrap();
        assert_eq!(g.evaluate(second[0]).unwrap().item(), 0.0);
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![2, 2]), true);
        let f = g.scale(x, 2.0).unwrap();
        assert!(matches!(g.differentiate(f, &[x], false), Err(Error::NonScalarOutput { .. })));
    }

    #[test]
    fn unreachable_variable_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = scalar_leaf(&mut g, 3.0);
        let y = g.leaf(Tensor::zeros(vec![2]), true);
        let f = g.mul(x, x).unwrap();
        let grads = g.differentiate(f, &[x, y], false).unwrap();
        assert_eq!(g.evaluate(grads[1]).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn add_shape_mismatch_is_construction_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2]));
        let b = g.constant(Tensor::zeros(vec![3]));
        assert!(matches!(g.add(a, b), Err(Error::Shape { op: "add", .. })));
    }

    #[test]
    fn non_finite_reports_op_kind() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(-1.0));
        let p = g.scalar_power(x, 0.5).unwrap();
        match g.evaluate(p) {
            Err(Error::NonFinite { op }) => assert_eq!(op, "scalar-power"),
            other => panic!("expected non-finite error, got {:?}", other.map(|t| t.item())),
        }
    }

    #[test]
    fn zero_grad_resets_exactly() {
        let mut g = Graph::new();
        let v = g.variable(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = g.mul(v.id(), v.id()).unwrap();
        let f = g.sum(sq).unwrap();
        g.backward(f).unwrap();
        assert_eq!(g.grad(v).data(), &[2.0, 4.0]);
        g.backward(f).unwrap();
        assert_eq!(g.grad(v).data(), &[4.0, 8.0]);
        g.zero_grad();
        assert!(g.grad(v).data().iter().all(|&x| x == 0.0));
        assert_eq!(g.grad(v).shape(), g.leaf_data(v.id()).shape());
    }

    /// Central finite differences of `root` with respect to the leaf `wrt`,
    /// step h = 1e-5 * (1 + |x|) per coordinate.
    fn finite_diff(g: &mut Graph, root: NodeId, wrt: NodeId) -> Vec<f64> {
        let base = g.leaf_data(wrt).data().to_vec();
        let mut out = Vec::with_capacity(base.len());
        for i in 0..base.len() {
            let h = 1e-5 * (1.0 + base[i].abs());
            let mut plus = base.clone();
            plus[i] += h;
            g.set_leaf(wrt, &plus).unwrap();
            let fp = g.evaluate(root).unwrap().item();
            let mut minus = base.clone();
            minus[i] -= h;
            g.set_leaf(wrt, &minus).unwrap();
            let fm = g.evaluate(root).unwrap().item();
            out.push((fp - fm) / (2.0 * h));
        }
        g.set_leaf(wrt, &base).unwrap();
        out
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    #[test]
    fn gradient_norm_wrt_inputs_matches_finite_differences() {
        // Two-parameter linear model: L = (theta . x)^2, then the gradient of
        // ||dL/dtheta||^2 with respect to x checked against central differences.
        let mut g = Graph::new();
        let theta = g.leaf(Tensor::new(vec![2, 1], vec![0.8, -0.4]).unwrap(), true);
        let x = g.leaf(Tensor::new(vec![2, 1], vec![0.3, 1.1]).unwrap(), true);
        let s = g.matmul_t(theta, x, true, false).unwrap();
        let loss = g.scalar_power(s, 2.0).unwrap();
        let grad_theta = g.differentiate(loss, &[theta], true).unwrap();
        let sq = g.scalar_power(grad_theta[0], 2.0).unwrap();
        let norm = g.sum(sq).unwrap();

        let ad = g.differentiate(norm, &[x], false).unwrap();
        let ad = g.evaluate(ad[0]).unwrap().data().to_vec();
        let fd = finite_diff(&mut g, norm, x);
        assert!(max_rel_err(&ad, &fd) < 1e-6, "rel err {}", max_rel_err(&ad, &fd));
    }

    #[test]
    fn differentiate_is_linear() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![3], vec![0.4, -1.2, 0.9]).unwrap(), true);
        let sig = g.sigmoid(x).unwrap();
        let f = g.sum(sig).unwrap();
        let cube = g.scalar_power(x, 3.0).unwrap();
        let h = g.sum(cube).unwrap();
        let (a, b) = (2.5, -0.75);
        let fa = g.scale(f, a).unwrap();
        let hb = g.scale(h, b).unwrap();
        let combo = g.add(fa, hb).unwrap();

        let dc = g.differentiate(combo, &[x], false).unwrap();
        let df = g.differentiate(f, &[x], false).unwrap();
        let dh = g.differentiate(h, &[x], false).unwrap();
        let dc = g.evaluate(dc[0]).unwrap();
        let df = g.evaluate(df[0]).unwrap();
        let dh = g.evaluate(dh[0]).unwrap();
        for i in 0..3 {
            let lin = a * df.data()[i] + b * dh.data()[i];
            let rel = (dc.data()[i] - lin).abs() / lin.abs().max(1e-300);
            assert!(rel < 1e-12, "component {i}: {} vs {}", dc.data()[i], lin);
        }
    }

    #[test]
    fn fixed_seed_gradients_are_bit_identical_across_runs() {
        let run = || {
            let mut rng = ChaCha20Rng::seed_from_u64(11);
            let mut g = Graph::new();
            let data: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = g.leaf(Tensor::new(vec![2, 3], data).unwrap(), true);
            let w = g.constant(Tensor::new(vec![3, 2], (0..6).map(|i| 0.1 * i as f64).collect()).unwrap());
            let p = g.matmul(x, w).unwrap();
            let s = g.sigmoid(p).unwrap();
            let f = g.sum(s).unwrap();
            let d = g.differentiate(f, &[x], false).unwrap();
            g.evaluate(d[0]).unwrap()
        };
        assert!(run().bitwise_eq(&run()));
    }

    /// Random scalar graphs from the supported op set; checks that
    /// differentiate of differentiate agrees with central finite differences
    /// of the first gradient along a random direction.
    #[test]
    fn double_differentiation_matches_finite_differences_of_gradient() {
        let mut worst: f64 = 0.0;
        for seed in 0..100u64 {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let n = rng.random_range(2..5usize);
            let data: Vec<f64> = (0..n * n).map(|_| rng.random_range(-0.9..0.9)).collect();
            let x = g.leaf(Tensor::new(vec![n, n], data).unwrap(), true);

            // A few random layers, then collapse to a scalar.
            let mut cur = x;
            for _ in 0..rng.random_range(1..4usize) {
                cur = match rng.random_range(0..6u32) {
                    0 => g.sigmoid(cur).unwrap(),
                    1 => {
                        let c = g.constant(Tensor::full(vec![n, n], rng.random_range(0.2..1.5)));
                        g.mul(cur, c).unwrap()
                    }
                    2 => {
                        let w = Tensor::new(vec![n, n], (0..n * n).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap();
                        let w = g.constant(w);
                        g.matmul(cur, w).unwrap()
                    }
                    3 => {
                        let s = g.sigmoid(cur).unwrap();
                        g.scalar_power(s, 2.0).unwrap()
                    }
                    4 => g.softmax_log(cur).unwrap(),
                    _ => g.scale(cur, rng.random_range(0.3..2.0)).unwrap(),
                };
            }
            let f = g.sum(cur).unwrap();

            let first = g.differentiate(f, &[x], true).unwrap();
            // Directional second derivative: d/dt grad(x + t v) at t=0 equals
            // the gradient of <v, grad> by symmetry of the Hessian.
            let v: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let vnode = g.constant(Tensor::new(vec![n, n], v.clone()).unwrap());
            let inner = g.mul(first[0], vnode).unwrap();
            let phi = g.sum(inner).unwrap();
            let hv = g.differentiate(phi, &[x], false).unwrap();
            let hv = g.evaluate(hv[0]).unwrap().data().to_vec();

            let base = g.leaf_data(x).data().to_vec();
            let scale = 1e-5 * (1.0 + base.iter().cloned().fold(0.0f64, |m, b| m.max(b.abs())));
            let shift = |sgn: f64, g: &mut Graph| {
                let moved: Vec<f64> = base.iter().zip(v.iter()).map(|(b, vi)| b + sgn * scale * vi).collect();
                g.set_leaf(x, &moved).unwrap();
                g.evaluate(first[0]).unwrap().data().to_vec()
            };
            let gp = shift(1.0, &mut g);
            let gm = shift(-1.0, &mut g);
            let fd: Vec<f64> = gp.iter().zip(gm.iter()).map(|(p, m)| (p - m) / (2.0 * scale)).collect();

            worst = worst.max(max_rel_err(&hv, &fd));
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    fn naive_conv(x: &Tensor, k: &Tensor, b: &[f64], stride: usize) -> Tensor {
        let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (c_out, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
        let oh = (h - kh) / stride + 1;
        let ow = (w - kw) / stride + 1;
        let mut out = vec![0.0; c_out * oh * ow];
        for oc in 0..c_out {
            for y in 0..oh {
                for xq in 0..ow {
                    let mut acc = b[oc];
                    for ic in 0..c_in {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let xv = x.data()[(ic * h + y * stride + dy) * w + xq * stride + dx];
                                let kv = k.data()[((oc * c_in + ic) * kh + dy) * kw + dx];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[(oc * oh + y) * ow + xq] = acc;
                }
            }
        }
        Tensor::new(vec![c_out, oh, ow], out).unwrap()
    }

    #[test]
    fn conv2d_matches_direct_convolution() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for &(c_in, c_out, h, w, k, s) in &[(1usize, 2usize, 6usize, 6usize, 3usize, 1usize), (2, 3, 7, 5, 3, 2), (1, 12, 16, 16, 5, 2)] {
            let x = Tensor::new(vec![c_in, h, w], (0..c_in * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let kt = Tensor::new(vec![c_out, c_in, k, k], (0..c_out * c_in * k * k).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap();
            let bias: Vec<f64> = (0..c_out).map(|_| rng.random_range(-0.2..0.2)).collect();

            let expect = naive_conv(&x, &kt, &bias, s);

            let mut g = Graph::new();
            let xn = g.constant(x);
            let kn = g.constant(kt);
            let bn = g.constant(Tensor::new(vec![c_out], bias).unwrap());
            let out = g.conv2d(xn, kn, bn, s).unwrap();
            let got = g.evaluate(out).unwrap();
            assert_eq!(got.shape(), expect.shape());
            for (a, b) in got.data().iter().zip(expect.data().iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2, 5, 5], (0..50).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(), true);
        let k = g.leaf(Tensor::new(vec![3, 2, 3, 3], (0..54).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap(), true);
        let b = g.leaf(Tensor::new(vec![3], vec![0.1, -0.2, 0.05]).unwrap(), true);
        let conv = g.conv2d(x, k, b, 2).unwrap();
        let act = g.sigmoid(conv).unwrap();
        let f = g.sum(act).unwrap();

        for leaf in [x, k, b] {
            let ad = g.differentiate(f, &[leaf], false).unwrap();
            let ad = g.evaluate(ad[0]).unwrap().data().to_vec();
            let fd = finite_diff(&mut g, f, leaf);
            assert!(max_rel_err(&ad, &fd) < 1e-6, "leaf rel err {}", max_rel_err(&ad, &fd));
        }
    }

    #[test]
    fn softmax_log_gradient_matches_finite_differences() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::new(vec![4, 1], vec![0.2, -1.0, 0.7, 0.1]).unwrap(), true);
        let p = g.constant(Tensor::new(vec![4, 1], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let ls = g.softmax_log(z).unwrap();
        let weighted = g.mul(p, ls).unwrap();
        let s = g.sum(weighted).unwrap();
        let loss = g.scale(s, -1.0).unwrap();
        let ad = g.differentiate(loss, &[z], false).unwrap();
        let ad = g.evaluate(ad[0]).unwrap().data().to_vec();
        let fd = finite_diff(&mut g, loss, z);
        assert!(max_rel_err(&ad, &fd) < 1e-6);
    }

    #[test]
    fn softmax_forms_probability_vector_and_matches_log() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::new(vec![5], vec![2.0, -3.0, 0.5, 0.0, 1.5]).unwrap());
        let s = g.softmax(z).unwrap();
        let ls = g.softmax_log(z).unwrap();
        let sv = g.evaluate(s).unwrap();
        let lv = g.evaluate(ls).unwrap();
        let total: f64 = sv.data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        for (a, b) in sv.data().iter().zip(lv.data().iter()) {
            assert!((a.ln() - b).abs() < 1e-12);
        }
    }
}
