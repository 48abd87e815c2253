//! Wengert-list reverse-mode differentiation.
//!
//! Every op appends one node holding its output value and the ids of its
//! inputs, so node order is a topological order by construction. `backward`
//! walks the list once in reverse and accumulates input gradients additively.

use std::cell::{Ref, RefCell};
use std::fmt;

use super::value::{check_finite, Tensor};
use super::{kernels, ops};
use crate::error::{Error, Result};

pub(crate) type NodeId = usize;

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Reshape(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Matmul(NodeId, NodeId),
    Bmm(NodeId, NodeId),
    TransposeLast2(NodeId),
    ExpandBatch(NodeId),
    AddRowBias(NodeId, NodeId),
    ScaleChannels(NodeId, NodeId),
    Concat(Vec<NodeId>, usize),
    SoftmaxRows(NodeId),
    Frobenius(NodeId),
    RowNorms(NodeId),
    CrossEntropy(NodeId, Vec<usize>),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: kernels::Conv2dGeom,
    },
    Conv3d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: kernels::Conv3dGeom,
    },
    AvgPool2d(NodeId, kernels::PoolGeom),
    Upsample(NodeId, kernels::UpsampleGeom),
    GlobalAvgPool(NodeId),
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Matmul(a, b) | Bmm(a, b) => vec![*a, *b],
            AddRowBias(a, b) | ScaleChannels(a, b) => vec![*a, *b],
            Scale(x, _) | Square(x) | Sum(x) | Mean(x) | Reshape(x) | Relu(x) | Sigmoid(x) => {
                vec![*x]
            }
            TransposeLast2(x) | ExpandBatch(x) | SoftmaxRows(x) | Frobenius(x) | RowNorms(x) => {
                vec![*x]
            }
            CrossEntropy(x, _) | AvgPool2d(x, _) | Upsample(x, _) | GlobalAvgPool(x) => vec![*x],
            Concat(xs, _) => xs.clone(),
            Conv2d { x, w, b, .. } | Conv3d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            Scale(..) => "scale",
            Square(..) => "square",
            Sum(..) => "sum",
            Mean(..) => "mean",
            Reshape(..) => "reshape",
            Relu(..) => "relu",
            Sigmoid(..) => "sigmoid",
            Matmul(..) => "matmul",
            Bmm(..) => "bmm",
            TransposeLast2(..) => "transpose",
            ExpandBatch(..) => "expand_batch",
            AddRowBias(..) => "add_row_bias",
            ScaleChannels(..) => "scale_channels",
            Concat(..) => "concat",
            SoftmaxRows(..) => "softmax_rows",
            Frobenius(..) => "frobenius_norm",
            RowNorms(..) => "row_norms",
            CrossEntropy(..) => "cross_entropy",
            Conv2d { .. } => "conv2d",
            Conv3d { .. } => "conv3d",
            AvgPool2d(..) => "avg_pool2d",
            Upsample(..) => "bilinear_upsample",
            GlobalAvgPool(..) => "global_avg_pool",
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Records operations in execution order for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.len()).finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        write!(f, "Var#{}({} {:?})", self.id, n.op.name(), n.value.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf. It is differentiable iff `t.requires_grad()`.
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        let requires_grad = t.requires_grad();
        let mut value = t;
        value.zero_grad();
        self.push_node(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        })
    }

    /// Records a non-differentiable input.
    pub fn constant(&self, mut t: Tensor) -> Var<'_> {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    /// Records a differentiable copy of a parameter.
    pub fn param(&self, t: &Tensor) -> Var<'_> {
        let mut value = t.clone();
        value.zero_grad();
        self.push_node(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        })
    }

    fn push_node(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn push(&self, value: Tensor, op: Op) -> Result<Var<'_>> {
        check_finite(value.data(), op.name())?;
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push_node(Node {
            value,
            op,
            requires_grad,
        }))
    }

    pub(crate) fn nodes(&self) -> Ref<'_, Vec<Node>> {
        self.nodes.borrow()
    }

    /// Reverse sweep from a scalar loss. Gradients of every differentiable
    /// node reachable from `loss` are returned; uses of a node accumulate.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Usage("loss was recorded on a different tape".into()));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            let mut emit = |input: NodeId, contrib: Vec<f64>| {
                debug_assert_eq!(contrib.len(), nodes[input].value.numel());
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            };
            backward_op(&nodes, &node.op, &node.value, &g, &mut emit);
            // Interior gradients are kept so callers can inspect them.
            grads[id] = Some(g);
        }
        for (id, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                check_finite(g, &format!("gradient of node {id} ({})", nodes[id].op.name()))?;
            }
        }
        Ok(Gradients { grads })
    }
}

fn backward_op(
    nodes: &[Node],
    op: &Op,
    out: &Tensor,
    g: &[f64],
    emit: &mut dyn FnMut(NodeId, Vec<f64>),
) {
    let need = |i: NodeId| nodes[i].requires_grad;
    let val = |i: NodeId| &nodes[i].value;
    use Op::*;
    match op {
        Leaf => {}
        Add(a, b) => {
            if need(*a) {
                emit(*a, g.to_vec());
            }
            if need(*b) {
                emit(*b, g.to_vec());
            }
        }
        Sub(a, b) => {
            if need(*a) {
                emit(*a, g.to_vec());
            }
            if need(*b) {
                emit(*b, g.iter().map(|v| -v).collect());
            }
        }
        Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            if need(*a) {
                emit(*a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
            }
            if need(*b) {
                emit(*b, g.iter().zip(av).map(|(g, a)| g * a).collect());
            }
        }
        Scale(x, s) => emit(*x, g.iter().map(|v| v * s).collect()),
        Square(x) => emit(
            *x,
            g.iter().zip(val(*x).data()).map(|(g, x)| 2.0 * x * g).collect(),
        ),
        Sum(x) => emit(*x, vec![g[0]; val(*x).numel()]),
        Mean(x) => {
            let n = val(*x).numel();
            emit(*x, vec![g[0] / n as f64; n]);
        }
        Reshape(x) => emit(*x, g.to_vec()),
        Relu(x) => emit(
            *x,
            g.iter()
                .zip(val(*x).data())
                .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                .collect(),
        ),
        Sigmoid(x) => emit(
            *x,
            g.iter()
                .zip(out.data())
                .map(|(g, y)| g * y * (1.0 - y))
                .collect(),
        ),
        Matmul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if need(*a) {
                emit(*a, kernels::matmul_nt(g, bv.data(), m, n, k));
            }
            if need(*b) {
                emit(*b, kernels::matmul_tn(av.data(), g, m, k, n));
            }
        }
        Bmm(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (batch, m, k, n) = (av.shape()[0], av.shape()[1], av.shape()[2], bv.shape()[2]);
            if need(*a) {
                let mut da = Vec::with_capacity(batch * m * k);
                for i in 0..batch {
                    da.extend(kernels::matmul_nt(
                        &g[i * m * n..(i + 1) * m * n],
                        &bv.data()[i * k * n..(i + 1) * k * n],
                        m,
                        n,
                        k,
                    ));
                }
                emit(*a, da);
            }
            if need(*b) {
                let mut db = Vec::with_capacity(batch * k * n);
                for i in 0..batch {
                    db.extend(kernels::matmul_tn(
                        &av.data()[i * m * k..(i + 1) * m * k],
                        &g[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                    ));
                }
                emit(*b, db);
            }
        }
        TransposeLast2(x) => {
            let s = out.shape();
            let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
            // out is [.., rows, cols]; the gradient transposes back.
            emit(*x, kernels::transpose_last2(g, out.numel() / (rows * cols), rows, cols));
        }
        ExpandBatch(x) => {
            let n = val(*x).numel();
            let mut acc = vec![0.0; n];
            for chunk in g.chunks_exact(n) {
                acc.iter_mut().zip(chunk).for_each(|(a, c)| *a += c);
            }
            emit(*x, acc);
        }
        AddRowBias(x, b) => {
            if need(*x) {
                emit(*x, g.to_vec());
            }
            if need(*b) {
                let c = val(*b).numel();
                let mut acc = vec![0.0; c];
                for chunk in g.chunks_exact(c) {
                    acc.iter_mut().zip(chunk).for_each(|(a, v)| *a += v);
                }
                emit(*b, acc);
            }
        }
        ScaleChannels(x, gate) => {
            let xv = val(*x);
            let plane = xv.shape()[2] * xv.shape()[3];
            let gv = val(*gate).data();
            if need(*x) {
                let dx = g
                    .chunks_exact(plane)
                    .zip(gv)
                    .flat_map(|(gp, s)| gp.iter().map(move |v| v * s))
                    .collect();
                emit(*x, dx);
            }
            if need(*gate) {
                let dg = g
                    .chunks_exact(plane)
                    .zip(xv.data().chunks_exact(plane))
                    .map(|(gp, xp)| gp.iter().zip(xp).map(|(a, b)| a * b).sum())
                    .collect();
                emit(*gate, dg);
            }
        }
        Concat(xs, axis) => {
            let shapes: Vec<&[usize]> = xs.iter().map(|&i| val(i).shape()).collect();
            for (i, part) in ops::split_concat_grad(g, &shapes, *axis).into_iter().enumerate() {
                if need(xs[i]) {
                    emit(xs[i], part);
                }
            }
        }
        SoftmaxRows(x) => {
            let n = out.shape()[1];
            let mut dx = Vec::with_capacity(g.len());
            for (gr, yr) in g.chunks_exact(n).zip(out.data().chunks_exact(n)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                dx.extend(gr.iter().zip(yr).map(|(gv, y)| y * (gv - dot)));
            }
            emit(*x, dx);
        }
        Frobenius(x) => {
            let norm = out.data()[0];
            let xs = val(*x).data();
            if norm == 0.0 {
                emit(*x, vec![0.0; xs.len()]);
            } else {
                emit(*x, xs.iter().map(|v| g[0] * v / norm).collect());
            }
        }
        RowNorms(x) => {
            let xv = val(*x);
            let n = xv.shape()[1];
            let dx = xv
                .data()
                .chunks_exact(n)
                .zip(out.data().iter().zip(g))
                .flat_map(|(row, (&norm, &gr))| {
                    row.iter()
                        .map(move |v| if norm == 0.0 { 0.0 } else { gr * v / norm })
                })
                .collect();
            emit(*x, dx);
        }
        CrossEntropy(x, labels) => {
            emit(*x, ops::cross_entropy_grad(val(*x), labels, g[0]));
        }
        Conv2d { x, w, b, geom } => {
            let grads = kernels::conv2d_backward(
                val(*x).data(),
                val(*w).data(),
                g,
                geom,
                need(*x),
                need(*w),
            );
            if let Some(dx) = grads.dx {
                emit(*x, dx);
            }
            if let Some(dw) = grads.dw {
                emit(*w, dw);
            }
            if let Some(b) = b {
                if need(*b) {
                    emit(*b, kernels::bias_grad(g, geom.batch, geom.c_out));
                }
            }
        }
        Conv3d { x, w, b, geom } => {
            let grads = kernels::conv3d_backward(
                val(*x).data(),
                val(*w).data(),
                g,
                geom,
                need(*x),
                need(*w),
            );
            if let Some(dx) = grads.dx {
                emit(*x, dx);
            }
            if let Some(dw) = grads.dw {
                emit(*w, dw);
            }
            if let Some(b) = b {
                if need(*b) {
                    emit(*b, kernels::bias_grad(g, geom.batch, geom.c_out));
                }
            }
        }
        AvgPool2d(x, geom) => emit(*x, kernels::avg_pool2d_backward(g, geom)),
        Upsample(x, geom) => emit(*x, kernels::upsample_backward(g, geom)),
        GlobalAvgPool(x) => {
            let s = val(*x).shape();
            let plane = s[2] * s[3];
            let inv = 1.0 / plane as f64;
            emit(
                *x,
                g.iter()
                    .flat_map(|v| std::iter::repeat_n(v * inv, plane))
                    .collect(),
            );
        }
    }
}

/// Result of a reverse sweep, indexed by the vars of the tape it came from.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like `var`; zeros if `var` was unreachable.
    pub fn tensor(&self, var: Var<'_>) -> Tensor {
        let shape = var.shape();
        match self.get(var) {
            Some(g) => Tensor::from_parts(shape, g.to_vec()),
            None => Tensor::zeros(&shape),
        }
    }
}

impl<'t> Var<'t> {
    pub(crate) fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn item(&self) -> Result<f64> {
        self.with_value(|t| t.item())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn backward(&self) -> Result<Gradients> {
        self.tape.backward(*self)
    }

    pub(crate) fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Usage("operands live on different tapes".into()))
        }
    }
}
