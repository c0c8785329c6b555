//! Reverse-mode differentiation over a recorded sequence of operations.

use std::sync::atomic::{AtomicU64, Ordering};

use super::ops::{self, ConvKernel, DenseParams, Padding, PoolKind};
use super::{Real, Shape, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Kind tag for each recorded operation; used in reports and for fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    Relu,
    Sigmoid,
    Add,
    Scale,
    Concat,
    Slice,
    GlobalPool,
    ChannelPool,
    BroadcastMul,
    Dense,
    Mse,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Add => "add",
            OpKind::Scale => "scale",
            OpKind::Concat => "concat_channels",
            OpKind::Slice => "slice_channels",
            OpKind::GlobalPool => "global_pool",
            OpKind::ChannelPool => "channel_pool",
            OpKind::BroadcastMul => "broadcast_mul",
            OpKind::Dense => "dense",
            OpKind::Mse => "mse",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        ALL_OPS.iter().copied().find(|k| k.name() == name)
    }
}

pub const ALL_OPS: [OpKind; 13] = [
    OpKind::Leaf,
    OpKind::Conv2d,
    OpKind::Relu,
    OpKind::Sigmoid,
    OpKind::Add,
    OpKind::Scale,
    OpKind::Concat,
    OpKind::Slice,
    OpKind::GlobalPool,
    OpKind::ChannelPool,
    OpKind::BroadcastMul,
    OpKind::Dense,
    OpKind::Mse,
];

enum Op<T> {
    Leaf,
    Conv2d {
        input: usize,
        /// (weight, bias, padding) per fused kernel
        kernels: Vec<(usize, usize, Padding)>,
    },
    Relu(usize),
    Sigmoid(usize),
    Add(usize, usize),
    Scale(usize, T),
    Concat(Vec<usize>),
    Slice {
        input: usize,
        start: usize,
    },
    GlobalPool(usize, PoolKind),
    ChannelPool(usize, PoolKind),
    BroadcastMul(usize, usize),
    Dense {
        input: usize,
        weight: usize,
        bias: usize,
    },
    Mse(usize, usize),
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Add(..) => OpKind::Add,
            Op::Scale(..) => OpKind::Scale,
            Op::Concat(_) => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::GlobalPool(..) => OpKind::GlobalPool,
            Op::ChannelPool(..) => OpKind::ChannelPool,
            Op::BroadcastMul(..) => OpKind::BroadcastMul,
            Op::Dense { .. } => OpKind::Dense,
            Op::Mse(..) => OpKind::Mse,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations as they are evaluated so gradients can be propagated
/// back from a scalar result.
pub struct Tape<T: Real = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
    fault: Option<OpKind>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Deliberately corrupt the backward rule of one operation kind.
    /// Exists only so the gradient checker's negative control can be exercised.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.index(v).expect("var belongs to this tape")].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.value(v).shape()
    }

    /// Scalar value of a (1, 1, 1, 1) result.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v).data()[0]
    }

    /// Fingerprint of every non-smooth decision on the tape: which ReLU inputs
    /// are positive and which element wins each max pool. Two evaluations with
    /// equal signatures lie on the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (k, node) in self.nodes.iter().enumerate() {
            match node.op {
                Op::Relu(i) => {
                    k.hash(&mut h);
                    for v in self.nodes[i].value.data() {
                        (*v > T::ZERO).hash(&mut h);
                    }
                }
                Op::GlobalPool(i, PoolKind::Max) => {
                    k.hash(&mut h);
                    ops::max_pool_winners(&self.nodes[i].value, true).hash(&mut h);
                }
                Op::ChannelPool(i, PoolKind::Max) => {
                    k.hash(&mut h);
                    ops::max_pool_winners(&self.nodes[i].value, false).hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Usage(format!("{v:?} was not recorded on this tape")));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self.id, index }
    }

    fn needs(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, padding: Padding) -> Result<Var> {
        self.conv2d_fused(x, &[(weight, bias, padding)])
    }

    /// Several kernels over one input, outputs concatenated along channels.
    pub fn conv2d_fused(&mut self, x: Var, kernels: &[(Var, Var, Padding)]) -> Result<Var> {
        let input = self.index(x)?;
        let mut idx = Vec::with_capacity(kernels.len());
        for &(w, b, p) in kernels {
            idx.push((self.index(w)?, self.index(b)?, p));
        }
        let value = {
            let views: Vec<ConvKernel<'_, T>> = idx
                .iter()
                .map(|&(w, b, padding)| ConvKernel {
                    weight: &self.nodes[w].value,
                    bias: &self.nodes[b].value,
                    padding,
                })
                .collect();
            ops::conv2d_fused(&self.nodes[input].value, &views)?
        };
        let mut deps = vec![input];
        deps.extend(idx.iter().flat_map(|&(w, b, _)| [w, b]));
        let rg = self.needs(&deps);
        Ok(self.push(value, Op::Conv2d { input, kernels: idx }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let i = self.index(x)?;
        let value = ops::relu(&self.nodes[i].value);
        let rg = self.needs(&[i]);
        Ok(self.push(value, Op::Relu(i), rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let i = self.index(x)?;
        let value = ops::sigmoid(&self.nodes[i].value);
        let rg = self.needs(&[i]);
        Ok(self.push(value, Op::Sigmoid(i), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (i, j) = (self.index(a)?, self.index(b)?);
        let value = ops::add(&self.nodes[i].value, &self.nodes[j].value)?;
        let rg = self.needs(&[i, j]);
        Ok(self.push(value, Op::Add(i, j), rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let i = self.index(x)?;
        let value = ops::scale(&self.nodes[i].value, factor);
        let rg = self.needs(&[i]);
        Ok(self.push(value, Op::Scale(i, factor), rg))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|&p| self.index(p)).collect::<Result<Vec<_>>>()?;
        let value = {
            let refs: Vec<&Tensor<T>> = idx.iter().map(|&i| &self.nodes[i].value).collect();
            ops::concat_channels(&refs)?
        };
        let rg = self.needs(&idx);
        Ok(self.push(value, Op::Concat(idx), rg))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let i = self.index(x)?;
        let value = ops::slice_channels(&self.nodes[i].value, start, len)?;
        let rg = self.needs(&[i]);
        Ok(self.push(value, Op::Slice { input: i, start }, rg))
    }

    pub fn global_pool(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let i = self.index(x)?;
        let value = ops::global_pool(&self.nodes[i].value, kind);
        let rg = self.needs(&[i]);
        Ok(self.push(value, Op::GlobalPool(i, kind), rg))
    }

    pub fn channel_pool(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let i = self.index(x)?;
        let value = ops::channel_pool(&self.nodes[i].value, kind);
        let rg = self.needs(&[i]);
        Ok(self.push(value, Op::ChannelPool(i, kind), rg))
    }

    pub fn broadcast_mul(&mut self, x: Var, map: Var) -> Result<Var> {
        let (i, j) = (self.index(x)?, self.index(map)?);
        let value = ops::broadcast_mul(&self.nodes[i].value, &self.nodes[j].value)?;
        let rg = self.needs(&[i, j]);
        Ok(self.push(value, Op::BroadcastMul(i, j), rg))
    }

    pub fn dense(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (input, w, b) = (self.index(x)?, self.index(weight)?, self.index(bias)?);
        let value = {
            let params = DenseParams {
                weight: self.nodes[w].value.clone(),
                bias: self.nodes[b].value.clone(),
            };
            ops::dense(&self.nodes[input].value, &params)?
        };
        let rg = self.needs(&[input, w, b]);
        Ok(self.push(value, Op::Dense { input, weight: w, bias: b }, rg))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (i, j) = (self.index(a)?, self.index(b)?);
        let v = ops::mse(&self.nodes[i].value, &self.nodes[j].value)?;
        let rg = self.needs(&[i, j]);
        Ok(self.push(Tensor::full(Shape::new(1, 1, 1, 1), v), Op::Mse(i, j), rg))
    }

    /// Propagate d(loss)/d(node) back through the tape. `loss` must be a
    /// single-element value.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.index(loss)?;
        if self.nodes[root].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar, got shape {}",
                self.nodes[root].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::full(self.nodes[root].value.shape(), T::ONE));

        for idx in (0..=root).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let mut contributions = self.node_backward(node, idx, &g)?;
            if self.fault == Some(node.op.kind()) {
                for (_, t) in &mut contributions {
                    for v in t.data_mut() {
                        *v = *v * T::from_f64(1.5) + T::from_f64(1e-3);
                    }
                }
            }
            for (target, contrib) in contributions {
                if !self.nodes[target].requires_grad {
                    continue;
                }
                match &mut grads[target] {
                    Some(acc) => {
                        for (a, &c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients {
            tape: self.id,
            leaves: self
                .nodes
                .iter()
                .map(|n| matches!(n.op, Op::Leaf) && n.requires_grad)
                .collect(),
            grads,
        })
    }

    fn node_backward(&self, node: &Node<T>, idx: usize, g: &Tensor<T>) -> Result<Vec<(usize, Tensor<T>)>> {
        let val = |i: usize| &self.nodes[i].value;
        let rg = |i: usize| self.nodes[i].requires_grad;
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { input, kernels } => {
                let views: Vec<ConvKernel<'_, T>> = kernels
                    .iter()
                    .map(|&(w, b, padding)| ConvKernel {
                        weight: val(w),
                        bias: val(b),
                        padding,
                    })
                    .collect();
                let (dx, dparams) = ops::conv2d_fused_backward(val(*input), &views, g, rg(*input))?;
                let mut out = Vec::new();
                if let Some(dx) = dx {
                    out.push((*input, dx));
                }
                for (&(w, b, _), (dw, db)) in kernels.iter().zip(dparams) {
                    out.push((w, dw));
                    out.push((b, db));
                }
                out
            }
            Op::Relu(i) => vec![(*i, ops::relu_backward(val(*i), g))],
            Op::Sigmoid(i) => vec![(*i, ops::sigmoid_backward(&self.nodes[idx].value, g))],
            Op::Add(i, j) => vec![(*i, g.clone()), (*j, g.clone())],
            Op::Scale(i, factor) => vec![(*i, ops::scale(g, *factor))],
            Op::Concat(parts) => {
                let mut start = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let c = val(p).shape().c;
                    out.push((p, ops::slice_channels(g, start, c)?));
                    start += c;
                }
                out
            }
            Op::Slice { input, start } => {
                vec![(*input, ops::slice_channels_backward(val(*input).shape(), *start, g))]
            }
            Op::GlobalPool(i, kind) => vec![(*i, ops::global_pool_backward(val(*i), *kind, g))],
            Op::ChannelPool(i, kind) => vec![(*i, ops::channel_pool_backward(val(*i), *kind, g))],
            Op::BroadcastMul(i, j) => {
                let (dx, dmap) = ops::broadcast_mul_backward(val(*i), val(*j), g);
                vec![(*i, dx), (*j, dmap)]
            }
            Op::Dense { input, weight, bias } => {
                let params = DenseParams {
                    weight: val(*weight).clone(),
                    bias: val(*bias).clone(),
                };
                let (dx, dw, db) = ops::dense_backward(val(*input), &params, g);
                vec![(*input, dx), (*weight, dw), (*bias, db)]
            }
            Op::Mse(i, j) => {
                let (da, db) = ops::mse_backward(val(*i), val(*j), g.data()[0]);
                vec![(*i, da), (*j, db)]
            }
        };
        Ok(out)
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    tape: u64,
    leaves: Vec<bool>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to a differentiable leaf.
    ///
    /// Leaves the loss does not depend on get an all-zero gradient. Asking
    /// for a var from another tape, or for a constant, is a usage error.
    pub fn wrt(&self, v: Var, shape_of: &Tape<T>) -> Result<Tensor<T>> {
        self.check(v)?;
        Ok(match &self.grads[v.index] {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape_of.shape(v)),
        })
    }

    /// Move a leaf gradient out without cloning.
    pub fn take(&mut self, v: Var, shape_of: &Tape<T>) -> Result<Tensor<T>> {
        self.check(v)?;
        Ok(self.grads[v.index]
            .take()
            .unwrap_or_else(|| Tensor::zeros(shape_of.shape(v))))
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.tape || v.index >= self.grads.len() {
            return Err(Error::Usage(format!("{v:?} is not part of this graph")));
        }
        if !self.leaves[v.index] {
            return Err(Error::Usage(format!("{v:?} is not a differentiable leaf")));
        }
        Ok(())
    }
}
