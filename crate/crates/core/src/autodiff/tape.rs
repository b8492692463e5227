use std::cell::{Cell, RefCell};
use std::sync::Arc;

use super::conv::ConvGeom;
use super::element::Element;
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Primitive operation kinds recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Op {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar(f64),
    /// `x * s` for a single-element tensor `s`.
    ScaleBy,
    Relu,
    Rsqrt,
    Reshape,
    SumAll,
    ExpandScalar,
    /// Sum over every axis except axis 1.
    SumChannels,
    ExpandChannels,
    /// `[B, K] -> [B]`
    SumRows,
    ExpandRows,
    Matmul {
        ta: bool,
        tb: bool,
    },
    Conv2d(ConvGeom),
    Conv2dInputGrad(ConvGeom),
    Conv2dWeightGrad(ConvGeom),
    Softmax,
    LogSumExp,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::ScaleBy => "scale_by",
            Op::Relu => "relu",
            Op::Rsqrt => "rsqrt",
            Op::Reshape => "reshape",
            Op::SumAll => "sum",
            Op::ExpandScalar => "expand_scalar",
            Op::SumChannels => "sum_channels",
            Op::ExpandChannels => "expand_channels",
            Op::SumRows => "sum_rows",
            Op::ExpandRows => "expand_rows",
            Op::Matmul { .. } => "matmul",
            Op::Conv2d(_) => "conv2d",
            Op::Conv2dInputGrad(_) => "conv2d_input_grad",
            Op::Conv2dWeightGrad(_) => "conv2d_weight_grad",
            Op::Softmax => "softmax",
            Op::LogSumExp => "logsumexp",
        }
    }
}

pub(crate) struct Node<T> {
    pub(crate) op: Op,
    pub(crate) inputs: Vec<usize>,
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Arc<[T]>,
    /// Depends on at least one leaf; untracked nodes keep no inputs.
    pub(crate) tracked: bool,
}

/// Append-only computation record.
///
/// Nodes are stored in creation order, which is a topological order. A
/// tape is single-writer: create one per task adaptation. Backward passes
/// run with `create_graph` append their own operations to the same tape,
/// which is what makes second derivatives available.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: Cell<bool>,
    in_graph_backward: Cell<bool>,
    backward_nodes: Cell<usize>,
    check_finite: bool,
    first_nonfinite: Cell<Option<(usize, &'static str)>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self::with_finite_check(false)
    }

    /// With checking on, the first node producing NaN/Inf is remembered
    /// and reported by [`Tape::check`].
    pub fn with_finite_check(check_finite: bool) -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(1024)),
            recording: Cell::new(true),
            in_graph_backward: Cell::new(false),
            backward_nodes: Cell::new(0),
            check_finite,
            first_nonfinite: Cell::new(None),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of tracked nodes appended by `create_graph` backward passes.
    /// Zero means no double-backward structure was ever materialized.
    pub fn backward_nodes(&self) -> usize {
        self.backward_nodes.get()
    }

    pub fn check(&self) -> Result<()> {
        match self.first_nonfinite.get() {
            Some((node, op)) => Err(Error::NonFinite { node, op }),
            None => Ok(()),
        }
    }

    /// A differentiable input.
    pub fn leaf(&self, t: &Tensor<T>) -> Var<'_, T> {
        let id = self.push_raw(Op::Leaf, &[], t.shape().to_vec(), t.arc().clone(), true);
        Var { tape: self, id }
    }

    pub fn constant(&self, t: &Tensor<T>) -> Var<'_, T> {
        let id = self.push_raw(
            Op::Constant,
            &[],
            t.shape().to_vec(),
            t.arc().clone(),
            false,
        );
        Var { tape: self, id }
    }

    pub fn scalar(&self, v: T) -> Var<'_, T> {
        self.constant(&Tensor::scalar(v))
    }

    pub(crate) fn push(
        &self,
        op: Op,
        inputs: &[usize],
        shape: Vec<usize>,
        value: Vec<T>,
    ) -> Var<'_, T> {
        let tracked = self.recording.get() && {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].tracked)
        };
        let id = self.push_raw(op, inputs, shape, value.into(), tracked);
        Var { tape: self, id }
    }

    fn push_raw(
        &self,
        op: Op,
        inputs: &[usize],
        shape: Vec<usize>,
        value: Arc<[T]>,
        tracked: bool,
    ) -> usize {
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        if self.check_finite
            && self.first_nonfinite.get().is_none()
            && value.iter().any(|v| !v.is_finite())
        {
            self.first_nonfinite.set(Some((id, op.name())));
        }
        if tracked && self.in_graph_backward.get() {
            self.backward_nodes.set(self.backward_nodes.get() + 1);
        }
        let (op, inputs) = if tracked || op == Op::Leaf {
            (op, inputs.to_vec())
        } else {
            (Op::Constant, Vec::new())
        };
        nodes.push(Node {
            op,
            inputs,
            shape,
            value,
            tracked,
        });
        id
    }

    pub(crate) fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].shape.clone()
    }

    pub(crate) fn value_of(&self, id: usize) -> Arc<[T]> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn is_tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    pub(crate) fn node_meta(&self, id: usize) -> (Op, Vec<usize>, bool) {
        let nodes = self.nodes.borrow();
        let n = &nodes[id];
        (n.op, n.inputs.clone(), n.tracked)
    }

    pub(crate) fn set_recording(&self, recording: bool, graph_backward: bool) -> (bool, bool) {
        let prev = (self.recording.get(), self.in_graph_backward.get());
        self.recording.set(recording);
        self.in_graph_backward.set(graph_backward);
        prev
    }
}

impl<'t, T: Element> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape())
    }

    pub fn value(&self) -> Tensor<T> {
        Tensor::from_arc(self.shape(), self.tape.value_of(self.id))
    }

    /// First element, as `f64`.
    pub fn item(&self) -> f64 {
        self.tape.value_of(self.id)[0].to_f64()
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.is_tracked(self.id)
    }

    /// Value-identical constant: gradients do not flow through it.
    pub fn stop_gradient(&self) -> Var<'t, T> {
        let id = self.tape.push_raw(
            Op::Constant,
            &[],
            self.shape(),
            self.tape.value_of(self.id),
            false,
        );
        Var {
            tape: self.tape,
            id,
        }
    }
}
