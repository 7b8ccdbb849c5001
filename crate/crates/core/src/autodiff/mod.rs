//! Reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape: every differentiable op called through it computes
//! its value eagerly and, when at least one input is tracked by the same
//! graph, appends a node holding whatever the backward pass needs. Nodes only
//! ever reference earlier nodes, so the tape is acyclic by construction and
//! [`Graph::backward`] is a single reverse sweep over insertion order.
//!
//! A graph built with [`Graph::inference`] records nothing; the values it
//! computes are bitwise identical to a recording graph.

pub(crate) mod kernels;
mod ops;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

pub use ops::{Activation, BatchNormOutput, BinaryKind, Reduction};

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Scalar, Tensor};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

type Buf<T> = Arc<Vec<T>>;

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add {
        a: Option<usize>,
        b: Option<usize>,
        bcast: Option<[usize; 4]>,
    },
    Mul {
        a: Option<usize>,
        b: Option<usize>,
        av: Buf<T>,
        bv: Buf<T>,
        bcast: Option<[usize; 4]>,
    },
    Scale {
        x: usize,
        factor: T,
    },
    Relu {
        x: usize,
        out: Buf<T>,
    },
    Sigmoid {
        x: usize,
        out: Buf<T>,
    },
    Reduce {
        x: usize,
        in_shape: Vec<usize>,
        axes: Vec<usize>,
        scale: T,
    },
    Reshape {
        x: usize,
    },
    Concat {
        a: Option<usize>,
        b: Option<usize>,
        dims: [usize; 4],
        cb: usize,
    },
    Linear {
        x: Option<usize>,
        w: Option<usize>,
        b: Option<usize>,
        xv: Buf<T>,
        wv: Buf<T>,
        dims: [usize; 3],
    },
    ChannelScale {
        x: Option<usize>,
        s: Option<usize>,
        xv: Buf<T>,
        sv: Buf<T>,
        dims: [usize; 4],
    },
    Conv {
        x: Option<usize>,
        w: Option<usize>,
        b: Option<usize>,
        xv: Buf<T>,
        wv: Buf<T>,
        geom: kernels::ConvGeom,
        transposed: bool,
    },
    BatchNorm {
        x: Option<usize>,
        gamma: Option<usize>,
        beta: Option<usize>,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        gv: Buf<T>,
        dims: [usize; 4],
        batch_stats: bool,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
        in_len: usize,
    },
    Bce {
        p: usize,
        pv: Buf<T>,
        tv: Buf<T>,
        clamp: T,
    },
    Dice {
        p: usize,
        pv: Buf<T>,
        tv: Buf<T>,
        smooth: T,
        batch: usize,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Reduce { .. } => "reduce",
            Op::Reshape { .. } => "reshape",
            Op::Concat { .. } => "concat_channels",
            Op::Linear { .. } => "linear",
            Op::ChannelScale { .. } => "channel_scale",
            Op::Conv { transposed: false, .. } => "conv2d",
            Op::Conv { transposed: true, .. } => "conv_transpose2d",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::MaxPool { .. } => "maxpool2d",
            Op::Bce { .. } => "bce",
            Op::Dice { .. } => "dice_loss",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    shape: Vec<usize>,
}

/// Computation graph (tape) for one forward pass.
#[derive(Debug)]
pub struct Graph<T: Scalar = f32> {
    id: u64,
    recording: bool,
    check_finite: bool,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A recording graph. Finite-value checks are on in debug builds.
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            recording: true,
            check_finite: cfg!(debug_assertions),
            nodes: Vec::new(),
        }
    }

    /// A graph that never records; ops only compute values.
    pub fn inference() -> Self {
        Graph {
            recording: false,
            ..Self::new()
        }
    }

    /// Turns the per-op finite-value check on or off.
    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded nodes per op name.
    pub fn op_counts(&self) -> BTreeMap<&'static str, usize> {
        let mut counts = BTreeMap::new();
        for node in &self.nodes {
            *counts.entry(node.op.name()).or_insert(0) += 1;
        }
        counts
    }

    /// Hash of every recorded branch decision: which ReLU inputs were
    /// positive, which element won each max-pool window, and which BCE
    /// predictions hit the clamp. Two forward passes with equal signatures
    /// lie on the same smooth piece of the function, which is what a
    /// finite-difference check needs.
    pub fn kink_signature(&self) -> u64 {
        use std::hash::{DefaultHasher, Hasher};
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { out, .. } => out.iter().for_each(|v| h.write_u8((*v > T::zero()) as u8)),
                Op::MaxPool { argmax, .. } => argmax.iter().for_each(|&i| h.write_usize(i)),
                Op::Bce { pv, clamp, .. } => pv.iter().for_each(|&p| {
                    h.write_u8(((p < *clamp) as u8) | (((p > T::one() - *clamp) as u8) << 1))
                }),
                _ => {}
            }
        }
        h.finish()
    }

    /// Registers `t` as a differentiable leaf and returns a tracked handle
    /// sharing its data. On an inference graph the result is untracked.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Tensor<T> {
        let node = self.push_leaf(t.shape());
        t.detach().with_node(node)
    }

    /// Like [`Graph::leaf`], but marks `t` itself as tracked.
    pub fn track(&mut self, t: &mut Tensor<T>) {
        let node = self.push_leaf(t.shape());
        t.node = node;
    }

    fn push_leaf(&mut self, shape: &[usize]) -> Option<NodeId> {
        if !self.recording {
            return None;
        }
        self.nodes.push(Node {
            op: Op::Leaf,
            shape: shape.to_vec(),
        });
        Some(NodeId {
            graph: self.id,
            index: self.nodes.len() - 1,
        })
    }

    /// Node index of `t` in this graph, `None` for constants.
    pub(crate) fn slot(&self, t: &Tensor<T>) -> Result<Option<usize>> {
        match t.node {
            None => Ok(None),
            Some(_) if !self.recording => Ok(None),
            Some(id) if id.graph == self.id && id.index < self.nodes.len() => Ok(Some(id.index)),
            Some(_) => Err(Error::invalid("tensor is tracked by a different graph")),
        }
    }

    /// Wraps a freshly computed value, recording `op` when given.
    pub(crate) fn emit(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        op: Option<Op<T>>,
    ) -> Result<Tensor<T>> {
        self.emit_shared(name, shape, Arc::new(data), op)
    }

    pub(crate) fn emit_shared(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Buf<T>,
        op: Option<Op<T>>,
    ) -> Result<Tensor<T>> {
        if self.check_finite && !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(name.to_string()));
        }
        let node = match op {
            Some(op) if self.recording => {
                self.nodes.push(Node {
                    op,
                    shape: shape.clone(),
                });
                Some(NodeId {
                    graph: self.id,
                    index: self.nodes.len() - 1,
                })
            }
            _ => None,
        };
        Ok(Tensor::from_shared(shape, data).with_node(node))
    }

    /// Reverse sweep from a scalar `loss`. Every leaf of this graph receives
    /// a gradient of its own shape (zeros when the loss does not depend on it).
    pub fn backward(&self, loss: &Tensor<T>) -> Result<Gradients<T>> {
        if loss.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let root = match loss.node {
            Some(id) if self.recording && id.graph == self.id && id.index < self.nodes.len() => id.index,
            _ => return Err(Error::invalid("loss was not produced by this graph")),
        };

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![T::one()]);
        for index in (0..=root).rev() {
            let Some(g) = grads[index].take() else { continue };
            let node = &self.nodes[index];
            if let Op::Leaf = node.op {
                grads[index] = Some(g);
                continue;
            }
            ops::backward_node(&node.op, &node.shape, &g, &mut grads, &self.nodes);
        }

        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf))
            .map(|(i, n)| {
                let data = grads[i].take().unwrap_or_else(|| vec![T::zero(); n.shape.iter().product()]);
                (i, Tensor::from_parts(n.shape.clone(), data))
            })
            .collect();
        Ok(Gradients { graph: self.id, leaves })
    }
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T: Scalar = f32> {
    graph: u64,
    leaves: BTreeMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a tracked leaf tensor.
    pub fn get(&self, leaf: &Tensor<T>) -> Option<&Tensor<T>> {
        let id = leaf.node?;
        if id.graph != self.graph {
            return None;
        }
        self.leaves.get(&id.index)
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}

pub(crate) fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], index: usize, contribution: Vec<T>) {
    match &mut grads[index] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e = *e + c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}
