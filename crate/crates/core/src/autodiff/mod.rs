//! Reverse-mode differentiation over an append-only tape.
//!
//! Every forward operation appends one node holding its output value, its
//! input references and whatever it saved for the backward pass. Node inputs
//! always precede the node, so [`Tape::backward`] is a single reverse sweep.

mod conv;
mod elementwise;
mod linalg;
mod nn;
mod pool;

use std::collections::HashMap;

pub use conv::Conv2dGeometry;
pub use nn::{BatchStats, BnMode};
pub use pool::GateGranularity;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, T),
    Exp(Var),
    Sigmoid(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    AddBias(Var, Var),
    AddChannelBias(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: Conv2dGeometry,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        input: Var,
        size: usize,
    },
    StridePool {
        input: Var,
        picks: Vec<usize>,
    },
    MixedPool {
        input: Var,
        mix: Var,
        size: usize,
        argmax: Vec<usize>,
        max_minus_avg: Vec<T>,
    },
    GatedPool {
        input: Var,
        omega: Var,
        size: usize,
        granularity: GateGranularity,
        argmax: Vec<usize>,
        gates: Vec<T>,
        max_minus_avg: Vec<T>,
    },
    BlockSoftmax {
        input: Var,
        size: usize,
    },
    BlockWeightedSum {
        weights: Var,
        features: Var,
        size: usize,
    },
    BlocksToRows {
        input: Var,
        block: (usize, usize),
    },
    RowsToBlocks {
        input: Var,
        block: (usize, usize),
    },
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Records a forward computation for later differentiation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    bound: Vec<(Var, ParamId)>,
    param_vars: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bound: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_unchecked(Op::Leaf, value, true)
    }

    /// A non-differentiable input (data, labels-derived masks, ...).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_unchecked(Op::Leaf, value, false)
    }

    /// Binds a parameter of `store` as a leaf. Repeated calls for the same
    /// parameter return the same variable.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.leaf(store.value(id).clone());
        self.bound.push((v, id));
        self.param_vars.insert(id, v);
        v
    }

    /// Parameters bound to this tape, in binding order.
    pub fn bound_params(&self) -> &[(Var, ParamId)] {
        &self.bound
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_unchecked(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Appends an operation output, rejecting NaN/Inf.
    pub(crate) fn push(
        &mut self,
        name: &'static str,
        op: Op<T>,
        value: Tensor<T>,
        inputs: &[Var],
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(op, value, requires_grad))
    }

    /// Fingerprint of every branch taken by a non-smooth operation: ReLU
    /// input signs and max-pool argmax positions. Two evaluations with equal
    /// fingerprints lie on the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &v in self.nodes[x.0].value.data() {
                        (v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. }
                | Op::MixedPool { argmax, .. }
                | Op::GatedPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(Error::invalid_shape(
                "backward",
                format!("loss must be scalar, shape is {:?}", loss_value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let (before, rest) = grads.split_at_mut(i);
            let Some(dy) = rest[0].as_deref() else {
                continue;
            };
            let mut sink = GradSink {
                tape: self,
                grads: before,
            };
            self.backward_node(&node.op, &node.value, dy, &mut sink);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, op: &Op<T>, out: &Tensor<T>, dy: &[T], sink: &mut GradSink<'_, T>) {
        match op {
            Op::Leaf => {}
            Op::Add(..)
            | Op::Sub(..)
            | Op::Mul(..)
            | Op::Div(..)
            | Op::Neg(..)
            | Op::Scale(..)
            | Op::Exp(..)
            | Op::Sigmoid(..)
            | Op::Relu(..)
            | Op::Sum(..)
            | Op::Mean(..)
            | Op::Reshape(..) => elementwise::backward(self, op, out, dy, sink),
            Op::MatMul(..) | Op::BatchMatMul(..) | Op::AddBias(..) | Op::AddChannelBias(..) => {
                linalg::backward(self, op, dy, sink)
            }
            Op::Conv2d { .. } => conv::backward(self, op, dy, sink),
            Op::BatchNorm { .. } | Op::CrossEntropy { .. } => nn::backward(self, op, dy, sink),
            Op::MaxPool { .. }
            | Op::AvgPool { .. }
            | Op::StridePool { .. }
            | Op::MixedPool { .. }
            | Op::GatedPool { .. }
            | Op::BlockSoftmax { .. }
            | Op::BlockWeightedSum { .. }
            | Op::BlocksToRows { .. }
            | Op::RowsToBlocks { .. } => pool::backward(self, op, out, dy, sink),
        }
    }
}

/// Lazily allocated gradient buffers for the nodes preceding the one being
/// differentiated.
pub(crate) struct GradSink<'a, T> {
    tape: &'a Tape<T>,
    grads: &'a mut [Option<Vec<T>>],
}

impl<T: Real> GradSink<'_, T> {
    /// Gradient accumulator for `v`, or `None` when `v` needs no gradient.
    pub(crate) fn get(&mut self, v: Var) -> Option<&mut [T]> {
        let node = &self.tape.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let numel = node.value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); numel]))
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient buffer of `v`, `None` when no path from the loss reaches it.
    pub fn raw(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` shaped like its value; zeros when unreached.
    pub fn get(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        let shape = tape.shape(v).to_vec();
        match self.raw(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient matches value shape"),
            None => Tensor::zeros(shape),
        }
    }
}

pub(crate) fn same_shape<T: Real>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(op, tape.shape(a), tape.shape(b)));
    }
    Ok(())
}
