//! Network building blocks.
//!
//! Layers own their parameter tensors and run through a [`Ctx`], which pairs
//! the autodiff [`Graph`] with the train/eval [`Mode`]. Layers never mutate
//! themselves during a forward pass: batch-norm running statistics computed in
//! training mode are queued on the context and applied afterwards with
//! [`apply_running_updates`], so an eval-mode forward only needs `&self`.

mod blocks;
mod conv;
mod norm;

use rand::Rng;

pub use blocks::{ResidualBlock, SqueezeExcite};
pub use conv::{Conv2d, ConvTranspose2d, Linear};
pub use norm::BatchNorm2d;

use crate::autodiff::Graph;
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// What a named tensor is for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    /// Learnable; receives gradients and optimizer updates.
    Param,
    /// Persistent state that is not learned (batch-norm running statistics).
    Buffer,
}

/// A running-statistics tensor to overwrite after a training forward pass.
#[derive(Debug, Clone)]
pub struct RunningUpdate<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
}

pub struct Ctx<'g, T: Scalar> {
    pub graph: &'g mut Graph<T>,
    pub mode: Mode,
    updates: Vec<RunningUpdate<T>>,
}

impl<'g, T: Scalar> Ctx<'g, T> {
    pub fn new(graph: &'g mut Graph<T>, mode: Mode) -> Self {
        Ctx {
            graph,
            mode,
            updates: Vec::new(),
        }
    }

    pub(crate) fn push_update(&mut self, name: String, value: Tensor<T>) {
        self.updates.push(RunningUpdate { name, value });
    }

    pub fn take_updates(&mut self) -> Vec<RunningUpdate<T>> {
        std::mem::take(&mut self.updates)
    }
}

/// Anything that owns named tensors.
pub trait Module<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, TensorRole));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, TensorRole));

    /// Number of learnable scalars.
    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t, role| {
            if role == TensorRole::Param {
                n += t.numel();
            }
        });
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Overwrites running statistics queued by training-mode forwards.
pub fn apply_running_updates<T: Scalar, M: Module<T> + ?Sized>(module: &mut M, updates: Vec<RunningUpdate<T>>) {
    if updates.is_empty() {
        return;
    }
    let mut pending: std::collections::HashMap<String, Tensor<T>> =
        updates.into_iter().map(|u| (u.name, u.value)).collect();
    module.visit_mut("", &mut |name, t, _| {
        if let Some(v) = pending.remove(name) {
            *t = v;
        }
    });
    debug_assert!(pending.is_empty(), "unmatched running updates: {:?}", pending.keys());
}

/// Fan-in scaled uniform initialization with ReLU gain:
/// `U(−√(6/fan_in), √(6/fan_in))`.
pub fn kaiming_uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect();
    Tensor::from_parts(shape, data)
}

/// 2×2 / stride-2 max pooling.
pub fn maxpool2d<T: Scalar>(ctx: &mut Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    ctx.graph.maxpool2x2(x)
}
