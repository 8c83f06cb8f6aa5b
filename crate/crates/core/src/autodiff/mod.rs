//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] owns every value computed for one batch. Nodes are appended in
//! evaluation order, so a node's parents always have smaller ids and the
//! reverse of insertion order is a valid reverse topological order.

mod conv;
mod ops;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

pub use conv::{col2im, im2col, ConvGeom, InputView, Padding};
pub use ops::NormStats;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

/// Handle to a node of one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Train mode uses batch statistics and dropout; infer mode is deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Local gradient rule of a node together with whatever the forward pass
/// saved for it.
#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    Leaf,
    Reshape(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    MulConst {
        input: NodeId,
        factor: Vec<T>,
    },
    Tanh(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Sum(NodeId),
    Softmax {
        input: NodeId,
        axis: usize,
    },
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    CapsuleTransform {
        input: NodeId,
        kernels: NodeId,
        geom: ConvGeom,
        in_channels: usize,
        out_channels: usize,
        out_dim: usize,
        cols: Vec<Vec<T>>,
    },
    ChannelwiseDot {
        input: NodeId,
        reference: NodeId,
    },
    WeightedChannelSum {
        stack: NodeId,
        weights: NodeId,
    },
    CapsuleAffine {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Dense {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        normalized: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    CapsuleLength(NodeId),
    MarginLoss {
        scores: NodeId,
        labels: Vec<usize>,
        m_plus: T,
        m_minus: T,
        lambda: T,
    },
    MeanSquaredError {
        input: NodeId,
        target: Vec<T>,
    },
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf => vec![],
            Reshape(a) | Scale(a, _) | Tanh(a) | Relu(a) | Sigmoid(a) | Sum(a) | CapsuleLength(a) => {
                vec![*a]
            }
            MulConst { input, .. } | Softmax { input, .. } | MeanSquaredError { input, .. } => {
                vec![*input]
            }
            MarginLoss { scores, .. } => vec![*scores],
            Add(a, b) | Mul(a, b) => vec![*a, *b],
            Conv2d {
                input, kernel, bias, ..
            } => {
                let mut v = vec![*input, *kernel];
                v.extend(bias.iter().copied());
                v
            }
            CapsuleTransform { input, kernels, .. } => vec![*input, *kernels],
            ChannelwiseDot { input, reference } => vec![*input, *reference],
            WeightedChannelSum { stack, weights } => vec![*stack, *weights],
            CapsuleAffine {
                input, weight, bias, ..
            }
            | Dense {
                input, weight, bias, ..
            } => vec![*input, *weight, *bias],
            BatchNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
    /// Batch statistics `(mean, biased variance)` of a train-mode batchnorm.
    pub(crate) stats: Option<(Vec<T>, Vec<T>)>,
}

/// Computation graph for one forward/backward pass.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf; gradients are collected for it.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf (images, fixed statistics).
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].value.shape()
    }

    /// Accumulated gradient, or `None` if no backward pass reached the node.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient with zeros substituted for an unreached node.
    pub fn grad_or_zeros(&self, id: NodeId) -> Tensor<T> {
        self.grad(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros_like_shape(self.shape(id)))
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Batch mean and biased variance computed by a train-mode batchnorm node.
    pub fn batch_stats(&self, id: NodeId) -> Option<(&[T], &[T])> {
        self.nodes[id.0]
            .stats
            .as_ref()
            .map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// Clears all gradients.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Propagates `d loss / d node` into every reachable node.
    ///
    /// Gradients of separate calls accumulate; call [`Graph::zero_grad`] in
    /// between to start over.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let n = self.nodes.len();
        if loss.0 >= n {
            return Err(Error::Graph(format!("node {} is not in this graph", loss.0)));
        }
        let shape = self.shape(loss);
        if shape.numel() != 1 {
            return Err(Error::Graph(format!("backward needs a scalar loss, got shape {shape}")));
        }
        let mut pass: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        pass[loss.0] = Some(Tensor::from_parts(shape, vec![T::one()]));
        for id in (0..=loss.0).rev() {
            let Some(g) = pass[id].take() else { continue };
            for p in self.nodes[id].op.parents() {
                if p.0 >= id {
                    return Err(Error::Graph(format!(
                        "cycle: node {id} depends on node {} which is not older",
                        p.0
                    )));
                }
            }
            if self.nodes[id].requires_grad {
                self.backward_node(id, &g, &mut pass)?;
            }
            pass[id] = Some(g);
        }
        if self.grads.len() < pass.len() {
            self.grads.resize(pass.len(), None);
        }
        for (slot, g) in self.grads.iter_mut().zip(pass) {
            match (slot.as_mut(), g) {
                (Some(acc), Some(g)) => acc.add_assign(&g),
                (None, Some(g)) => *slot = Some(g),
                _ => {}
            }
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            stats: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, requires_grad)
    }

    fn check_node(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::Graph(format!("node {} is not in this graph", id.0)))
        }
    }
}

/// Adds `g` into the pass gradient of `id` when that node wants one.
pub(crate) fn accumulate<T: Real>(
    nodes: &[Node<T>],
    pass: &mut [Option<Tensor<T>>],
    id: NodeId,
    g: Tensor<T>,
) {
    if !nodes[id.0].requires_grad {
        return;
    }
    match &mut pass[id.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Like [`accumulate`] but takes a closure so unneeded gradients are never
/// computed.
pub(crate) fn accumulate_with<T: Real>(
    nodes: &[Node<T>],
    pass: &mut [Option<Tensor<T>>],
    id: NodeId,
    f: impl FnOnce() -> Tensor<T>,
) {
    if nodes[id.0].requires_grad {
        accumulate(nodes, pass, id, f());
    }
}
