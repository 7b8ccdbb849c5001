use rand::Rng;

use super::{join, BatchNorm2d, Conv2d, Ctx, Linear, Module, TensorRole};
use crate::error::{ensure, Result};
use crate::tensor::{Scalar, Tensor};

/// Channel attention: global average pool, a reduce/expand pair of fully
/// connected layers, and a sigmoid that rescales each channel.
#[derive(Debug, Clone)]
pub struct SqueezeExcite<T: Scalar> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> SqueezeExcite<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, channels: usize, ratio: usize) -> Result<Self> {
        ensure!(
            ratio > 0 && channels % ratio == 0,
            "squeeze-excite ratio {ratio} must divide {channels} channels"
        );
        let hidden = channels / ratio;
        Ok(SqueezeExcite {
            fc1: Linear::new(rng, channels, hidden),
            fc2: Linear::new(rng, hidden, channels),
        })
    }

    pub fn channels(&self) -> usize {
        self.fc1.weight.shape()[1]
    }

    /// Per-image channel scales in (0, 1), shape `(N, C)`.
    pub fn scales(&self, ctx: &mut Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, c, _, _] = x.dims4()?;
        ensure!(
            c == self.channels(),
            "squeeze-excite: input has {c} channels, block has {}",
            self.channels()
        );
        let pooled = ctx.graph.mean(x, &[2, 3])?;
        let pooled = ctx.graph.reshape(&pooled, &[n, c])?;
        let hidden = self.fc1.forward(ctx, &pooled)?;
        let hidden = ctx.graph.relu(&hidden)?;
        let logits = self.fc2.forward(ctx, &hidden)?;
        ctx.graph.sigmoid(&logits)
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.scales(ctx, x)?;
        ctx.graph.channel_scale(x, &s)
    }
}

impl<T: Scalar> Module<T> for SqueezeExcite<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, TensorRole)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, TensorRole)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// `ReLU(BN2(Conv2(ReLU(BN1(Conv1(x))))) + shortcut(x))` with 3×3 convs.
/// The shortcut is the identity when channel counts match and a 1×1
/// convolution plus batch norm otherwise.
#[derive(Debug, Clone)]
pub struct ResidualBlock<T: Scalar> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm2d<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm2d<T>,
    pub shortcut: Option<(Conv2d<T>, BatchNorm2d<T>)>,
}

impl<T: Scalar> ResidualBlock<T> {
    /// `key` is the path the owner visits this block under.
    pub fn new<R: Rng + ?Sized>(rng: &mut R, key: &str, in_channels: usize, out_channels: usize) -> Self {
        // Convolutions feeding batch norm carry no bias; it would be cancelled by the mean.
        let conv1 = Conv2d::new(rng, in_channels, out_channels, 3, 1, 1, false);
        let conv2 = Conv2d::new(rng, out_channels, out_channels, 3, 1, 1, false);
        let shortcut = (in_channels != out_channels).then(|| {
            (
                Conv2d::new(rng, in_channels, out_channels, 1, 1, 0, false),
                BatchNorm2d::new(join(key, "shortcut_bn"), out_channels),
            )
        });
        ResidualBlock {
            conv1,
            bn1: BatchNorm2d::new(join(key, "bn1"), out_channels),
            conv2,
            bn2: BatchNorm2d::new(join(key, "bn2"), out_channels),
            shortcut,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_channels()
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [_, c, _, _] = x.dims4()?;
        ensure!(
            c == self.in_channels(),
            "residual block: input has {c} channels, block expects {}",
            self.in_channels()
        );
        let h = self.conv1.forward(ctx, x)?;
        let h = self.bn1.forward(ctx, &h)?;
        let h = ctx.graph.relu(&h)?;
        let h = self.conv2.forward(ctx, &h)?;
        let h = self.bn2.forward(ctx, &h)?;
        let skip = match &self.shortcut {
            None => x.clone(),
            Some((conv, bn)) => {
                let s = conv.forward(ctx, x)?;
                bn.forward(ctx, &s)?
            }
        };
        let sum = ctx.graph.add(&h, &skip)?;
        ctx.graph.relu(&sum)
    }
}

impl<T: Scalar> Module<T> for ResidualBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, TensorRole)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
        if let Some((conv, bn)) = &self.shortcut {
            conv.visit(&join(prefix, "shortcut_conv"), f);
            bn.visit(&join(prefix, "shortcut_bn"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, TensorRole)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.bn2.visit_mut(&join(prefix, "bn2"), f);
        if let Some((conv, bn)) = &mut self.shortcut {
            conv.visit_mut(&join(prefix, "shortcut_conv"), f);
            bn.visit_mut(&join(prefix, "shortcut_bn"), f);
        }
    }
}
