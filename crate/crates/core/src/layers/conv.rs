use rand::Rng;

use super::{join, kaiming_uniform, Ctx, Module, TensorRole};
use crate::error::{ensure, Result};
use crate::tensor::{Scalar, Tensor};

/// 2-D convolution (cross-correlation) with weight `(out, in, kh, kw)`.
#[derive(Debug, Clone)]
pub struct Conv2d<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Conv2d {
            weight: kaiming_uniform(rng, vec![out_channels, in_channels, kernel, kernel], fan_in),
            bias: bias.then(|| Tensor::zeros(vec![out_channels])),
            stride,
            padding,
        }
    }

    /// Builds from explicit tensors, validating their shapes.
    pub fn from_tensors(weight: Tensor<T>, bias: Option<Tensor<T>>, stride: usize, padding: usize) -> Result<Self> {
        ensure!(weight.rank() == 4, "conv weight must be rank 4, got {:?}", weight.shape());
        if let Some(b) = &bias {
            ensure!(
                b.shape() == [weight.shape()[0]],
                "conv bias {:?} does not match weight {:?}",
                b.shape(),
                weight.shape()
            );
        }
        ensure!(stride >= 1, "conv stride must be positive");
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }

    /// `None` when the kernel does not fit or the stride leaves a remainder.
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (kh, kw) = self.kernel();
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < kh || pw < kw || (ph - kh) % self.stride != 0 || (pw - kw) % self.stride != 0 {
            return None;
        }
        Some(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        ctx.graph
            .conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.padding)
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, TensorRole)) {
        f(&join(prefix, "weight"), &self.weight, TensorRole::Param);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b, TensorRole::Param);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, TensorRole)) {
        f(&join(prefix, "weight"), &mut self.weight, TensorRole::Param);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b, TensorRole::Param);
        }
    }
}

/// Transposed convolution with weight `(in, out, kh, kw)`; with kernel 4,
/// stride 2 and padding 1 it doubles the spatial size.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> ConvTranspose2d<T> {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        // Each output pixel of a stride-s transpose conv sees (k/s)² taps per input channel.
        let taps = (kernel / stride.max(1)).max(1);
        let fan_in = in_channels * taps * taps;
        ConvTranspose2d {
            weight: kaiming_uniform(rng, vec![in_channels, out_channels, kernel, kernel], fan_in),
            bias: Some(Tensor::zeros(vec![out_channels])),
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.weight.shape()[2];
        (
            (h - 1) * self.stride + k - 2 * self.padding,
            (w - 1) * self.stride + self.weight.shape()[3] - 2 * self.padding,
        )
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        ctx.graph
            .conv_transpose2d(x, &self.weight, self.bias.as_ref(), self.stride, self.padding)
    }
}

impl<T: Scalar> Module<T> for ConvTranspose2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, TensorRole)) {
        f(&join(prefix, "weight"), &self.weight, TensorRole::Param);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b, TensorRole::Param);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, TensorRole)) {
        f(&join(prefix, "weight"), &mut self.weight, TensorRole::Param);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b, TensorRole::Param);
        }
    }
}

/// Fully connected layer, weight `(out, in)`.
#[derive(Debug, Clone)]
pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, in_features: usize, out_features: usize) -> Self {
        Linear {
            weight: kaiming_uniform(rng, vec![out_features, in_features], in_features),
            bias: Tensor::zeros(vec![out_features]),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        ctx.graph.linear(x, &self.weight, &self.bias)
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, TensorRole)) {
        f(&join(prefix, "weight"), &self.weight, TensorRole::Param);
        f(&join(prefix, "bias"), &self.bias, TensorRole::Param);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, TensorRole)) {
        f(&join(prefix, "weight"), &mut self.weight, TensorRole::Param);
        f(&join(prefix, "bias"), &mut self.bias, TensorRole::Param);
    }
}
