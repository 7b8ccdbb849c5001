use rayon::prelude::*;

use super::kernels::{self, ConvGeom};
use super::{accumulate, Graph, Node, Op};
use crate::error::{ensure, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

/// Result of [`Graph::batch_norm`]. `batch_mean`/`batch_var` are set only
/// when batch statistics were used (training mode).
#[derive(Debug)]
pub struct BatchNormOutput<T: Scalar> {
    pub output: Tensor<T>,
    pub batch_mean: Option<Vec<T>>,
    pub batch_var: Option<Vec<T>>,
}

/// Shape check for the one supported broadcast: `(N,1,H,W)` over `(N,C,H,W)`.
fn broadcast_dims(a: &[usize], b: &[usize], what: &str) -> Result<Option<[usize; 4]>> {
    if a == b {
        return Ok(None);
    }
    ensure!(
        a.len() == 4 && b.len() == 4 && b[0] == a[0] && b[1] == 1 && b[2] == a[2] && b[3] == a[3],
        "{what}: shapes {a:?} and {b:?} are neither equal nor channel-broadcastable"
    );
    Ok(Some([a[0], a[1], a[2], a[3]]))
}

/// Sigmoid clamped into the open interval (0, 1).
#[inline]
fn sigmoid<T: Scalar>(v: T) -> T {
    let s = if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    };
    let upper = T::one() - T::epsilon() / T::from_f64(2.0);
    s.max(T::min_positive_value()).min(upper)
}

impl<T: Scalar> Graph<T> {
    pub fn binary(&mut self, a: &Tensor<T>, b: &Tensor<T>, kind: BinaryKind) -> Result<Tensor<T>> {
        match kind {
            BinaryKind::Add => self.add(a, b),
            BinaryKind::Mul => self.mul(a, b),
        }
    }

    /// Elementwise sum. `b` may be `(N,1,H,W)` against `a`'s `(N,C,H,W)`.
    pub fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let bcast = broadcast_dims(a.shape(), b.shape(), "add")?;
        let (sa, sb) = (self.slot(a)?, self.slot(b)?);
        let data = match bcast {
            None => a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect(),
            Some([_, c, h, w]) => {
                let plane = h * w;
                a.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| x + b.data()[(i / (c * plane)) * plane + i % plane])
                    .collect()
            }
        };
        let op = (sa.is_some() || sb.is_some()).then_some(Op::Add { a: sa, b: sb, bcast });
        self.emit("add", a.shape().to_vec(), data, op)
    }

    /// Elementwise product. `b` may be `(N,1,H,W)` against `a`'s `(N,C,H,W)`,
    /// which scales every channel of `a` by the same map.
    pub fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let bcast = broadcast_dims(a.shape(), b.shape(), "mul")?;
        let (sa, sb) = (self.slot(a)?, self.slot(b)?);
        let data = match bcast {
            None => a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect(),
            Some([_, c, h, w]) => {
                let plane = h * w;
                a.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| x * b.data()[(i / (c * plane)) * plane + i % plane])
                    .collect()
            }
        };
        let op = (sa.is_some() || sb.is_some()).then(|| Op::Mul {
            a: sa,
            b: sb,
            av: a.shared_data(),
            bv: b.shared_data(),
            bcast,
        });
        self.emit("mul", a.shape().to_vec(), data, op)
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: &Tensor<T>, factor: f64) -> Result<Tensor<T>> {
        let factor = T::from_f64(factor);
        let sx = self.slot(x)?;
        let data = x.data().iter().map(|&v| v * factor).collect();
        let op = sx.map(|x| Op::Scale { x, factor });
        self.emit("scale", x.shape().to_vec(), data, op)
    }

    pub fn activation(&mut self, x: &Tensor<T>, kind: Activation) -> Result<Tensor<T>> {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::Sigmoid => self.sigmoid(x),
        }
    }

    pub fn relu(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let sx = self.slot(x)?;
        let data: Vec<T> = x.data().iter().map(|&v| v.max(T::zero())).collect();
        self.unary_with_output("relu", x, sx, data, |x, out| Op::Relu { x, out })
    }

    pub fn sigmoid(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let sx = self.slot(x)?;
        let data: Vec<T> = x.data().iter().map(|&v| sigmoid(v)).collect();
        self.unary_with_output("sigmoid", x, sx, data, |x, out| Op::Sigmoid { x, out })
    }

    fn unary_with_output(
        &mut self,
        name: &'static str,
        x: &Tensor<T>,
        sx: Option<usize>,
        data: Vec<T>,
        make: impl FnOnce(usize, super::Buf<T>) -> Op<T>,
    ) -> Result<Tensor<T>> {
        let data = std::sync::Arc::new(data);
        let op = sx.map(|ix| make(ix, std::sync::Arc::clone(&data)));
        self.emit_shared(name, x.shape().to_vec(), data, op)
    }

    pub fn reduce(&mut self, x: &Tensor<T>, kind: Reduction, axes: &[usize]) -> Result<Tensor<T>> {
        let rank = x.rank();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        for &a in &axes {
            ensure!(a < rank, "reduce: axis {a} out of range for rank {rank}");
        }
        let mut out_shape = x.shape().to_vec();
        for &a in &axes {
            out_shape[a] = 1;
        }
        let count: usize = axes.iter().map(|&a| x.shape()[a]).product();
        let scale = match kind {
            Reduction::Sum => T::one(),
            Reduction::Mean => T::one() / T::from_f64(count.max(1) as f64),
        };
        let map = reduce_index_map(x.shape(), &axes);
        let mut data = vec![T::zero(); out_shape.iter().product()];
        for (&v, &o) in x.data().iter().zip(&map) {
            data[o] = data[o] + v;
        }
        if kind == Reduction::Mean {
            for v in &mut data {
                *v = *v * scale;
            }
        }
        let sx = self.slot(x)?;
        let op = sx.map(|x_ix| Op::Reduce {
            x: x_ix,
            in_shape: x.shape().to_vec(),
            axes,
            scale,
        });
        self.emit("reduce", out_shape, data, op)
    }

    pub fn sum(&mut self, x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
        self.reduce(x, Reduction::Sum, axes)
    }

    pub fn mean(&mut self, x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
        self.reduce(x, Reduction::Mean, axes)
    }

    /// Sum over every axis, as a rank-preserving single-element tensor.
    pub fn sum_all(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let axes: Vec<usize> = (0..x.rank()).collect();
        self.sum(x, &axes)
    }

    pub fn reshape(&mut self, x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
        ensure!(
            shape.iter().product::<usize>() == x.numel(),
            "reshape: cannot view {:?} as {shape:?}",
            x.shape()
        );
        let sx = self.slot(x)?;
        let op = sx.map(|x| Op::Reshape { x });
        self.emit("reshape", shape.to_vec(), x.data().to_vec(), op)
    }

    /// Concatenates along the channel axis, `a`'s channels first.
    pub fn concat_channels(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, ca, h, w] = a.dims4()?;
        let [nb, cb, hb, wb] = b.dims4()?;
        ensure!(
            n == nb && h == hb && w == wb,
            "concat_channels: {:?} and {:?} differ outside the channel axis",
            a.shape(),
            b.shape()
        );
        let plane = h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            data.extend_from_slice(&a.data()[i * ca * plane..(i + 1) * ca * plane]);
            data.extend_from_slice(&b.data()[i * cb * plane..(i + 1) * cb * plane]);
        }
        let (sa, sb) = (self.slot(a)?, self.slot(b)?);
        let op = (sa.is_some() || sb.is_some()).then_some(Op::Concat {
            a: sa,
            b: sb,
            dims: [n, ca, h, w],
            cb,
        });
        self.emit("concat_channels", vec![n, ca + cb, h, w], data, op)
    }

    /// `y = x·wᵀ + b` with `x: (N, C_in)`, `w: (C_out, C_in)`, `b: (C_out)`.
    pub fn linear(&mut self, x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        ensure!(x.rank() == 2, "linear: input must be rank 2, got {:?}", x.shape());
        ensure!(w.rank() == 2, "linear: weight must be rank 2, got {:?}", w.shape());
        let (n, cin) = (x.shape()[0], x.shape()[1]);
        let cout = w.shape()[0];
        ensure!(
            w.shape()[1] == cin,
            "linear: weight {:?} does not accept {cin} inputs",
            w.shape()
        );
        ensure!(b.shape() == [cout], "linear: bias {:?} should be [{cout}]", b.shape());
        let (xd, wd, bd) = (x.data(), w.data(), b.data());
        let mut data = Vec::with_capacity(n * cout);
        for i in 0..n {
            for o in 0..cout {
                let mut acc = bd[o];
                for k in 0..cin {
                    acc = acc + xd[i * cin + k] * wd[o * cin + k];
                }
                data.push(acc);
            }
        }
        let (sx, sw, sb) = (self.slot(x)?, self.slot(w)?, self.slot(b)?);
        let op = (sx.is_some() || sw.is_some() || sb.is_some()).then(|| Op::Linear {
            x: sx,
            w: sw,
            b: sb,
            xv: x.shared_data(),
            wv: w.shared_data(),
            dims: [n, cin, cout],
        });
        self.emit("linear", vec![n, cout], data, op)
    }

    /// Scales channel `c` of image `n` in `x: (N,C,H,W)` by `s[n, c]`, `s: (N,C)`.
    pub fn channel_scale(&mut self, x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, c, h, w] = x.dims4()?;
        ensure!(
            s.shape() == [n, c],
            "channel_scale: scale {:?} should be [{n}, {c}]",
            s.shape()
        );
        let plane = h * w;
        let sd = s.data();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sd[i / plane])
            .collect();
        let (sx, ss) = (self.slot(x)?, self.slot(s)?);
        let op = (sx.is_some() || ss.is_some()).then(|| Op::ChannelScale {
            x: sx,
            s: ss,
            xv: x.shared_data(),
            sv: s.shared_data(),
            dims: [n, c, h, w],
        });
        self.emit("channel_scale", x.shape().to_vec(), data, op)
    }

    /// 2-D cross-correlation with zero padding; output size
    /// `(H + 2·pad − kh)/stride + 1`, which must be integral.
    /// `x: (N,C_in,H,W)`, `w: (C_out,C_in,kh,kw)`, `b: (C_out)`.
    pub fn conv2d(
        &mut self,
        x: &Tensor<T>,
        w: &Tensor<T>,
        b: Option<&Tensor<T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<T>> {
        let [n, cin, h, wd] = x.dims4()?;
        let [cout, wcin, kh, kw] = w.dims4()?;
        ensure!(stride >= 1, "conv2d: stride must be positive");
        ensure!(
            wcin == cin,
            "conv2d: input has {cin} channels, weight expects {wcin}"
        );
        ensure!(
            h + 2 * pad >= kh && wd + 2 * pad >= kw,
            "conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}"
        );
        ensure!(
            (h + 2 * pad - kh) % stride == 0 && (wd + 2 * pad - kw) % stride == 0,
            "conv2d: {h}x{wd} input, kernel {kh}x{kw}, stride {stride}, padding {pad} gives a non-integral output size"
        );
        if let Some(b) = b {
            ensure!(b.shape() == [cout], "conv2d: bias {:?} should be [{cout}]", b.shape());
        }
        let geom = ConvGeom {
            n,
            c_in: cin,
            h,
            w: wd,
            c_out: cout,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        };
        let mut data = kernels::conv2d_forward(x.data(), w.data(), &geom);
        if let Some(b) = b {
            kernels::add_channel_bias(&mut data, b.data(), cout, geom.ho * geom.wo);
        }
        self.emit_conv("conv2d", x, w, b, geom, false, vec![n, cout, geom.ho, geom.wo], data)
    }

    /// Transposed convolution, the adjoint of [`Graph::conv2d`] with the same
    /// kernel. `x: (N,C_in,H,W)`, `w: (C_in,C_out,kh,kw)`, `b: (C_out)`;
    /// output spatial size is `(H-1)·stride − 2·pad + kh`.
    pub fn conv_transpose2d(
        &mut self,
        x: &Tensor<T>,
        w: &Tensor<T>,
        b: Option<&Tensor<T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<T>> {
        let [n, cin, h, wd] = x.dims4()?;
        let [wcin, cout, kh, kw] = w.dims4()?;
        ensure!(stride >= 1, "conv_transpose2d: stride must be positive");
        ensure!(
            wcin == cin,
            "conv_transpose2d: input has {cin} channels, weight expects {wcin}"
        );
        ensure!(h >= 1 && wd >= 1, "conv_transpose2d: empty input");
        ensure!(
            (h - 1) * stride + kh > 2 * pad && (wd - 1) * stride + kw > 2 * pad,
            "conv_transpose2d: padding {pad} leaves no output"
        );
        if let Some(b) = b {
            ensure!(
                b.shape() == [cout],
                "conv_transpose2d: bias {:?} should be [{cout}]",
                b.shape()
            );
        }
        let (ho, wo) = ((h - 1) * stride + kh - 2 * pad, (wd - 1) * stride + kw - 2 * pad);
        // Described as the conv2d that maps the output back onto the input.
        let geom = ConvGeom {
            n,
            c_in: cout,
            h: ho,
            w: wo,
            c_out: cin,
            kh,
            kw,
            stride,
            pad,
            ho: h,
            wo: wd,
        };
        let mut data = kernels::conv2d_grad_input(x.data(), w.data(), &geom);
        if let Some(b) = b {
            kernels::add_channel_bias(&mut data, b.data(), cout, ho * wo);
        }
        self.emit_conv("conv_transpose2d", x, w, b, geom, true, vec![n, cout, ho, wo], data)
    }

    #[allow(clippy::too_many_arguments)]
    fn emit_conv(
        &mut self,
        name: &'static str,
        x: &Tensor<T>,
        w: &Tensor<T>,
        b: Option<&Tensor<T>>,
        geom: ConvGeom,
        transposed: bool,
        shape: Vec<usize>,
        data: Vec<T>,
    ) -> Result<Tensor<T>> {
        let sx = self.slot(x)?;
        let sw = self.slot(w)?;
        let sb = match b {
            Some(b) => self.slot(b)?,
            None => None,
        };
        let op = (sx.is_some() || sw.is_some() || sb.is_some()).then(|| Op::Conv {
            x: sx,
            w: sw,
            b: sb,
            xv: x.shared_data(),
            wv: w.shared_data(),
            geom,
            transposed,
        });
        self.emit(name, shape, data, op)
    }

    /// Per-channel batch normalization of `x: (N,C,H,W)`.
    ///
    /// With `running = None` the biased statistics of this batch are used
    /// (and returned); otherwise the given `(mean, var)` are treated as
    /// constants.
    pub fn batch_norm(
        &mut self,
        x: &Tensor<T>,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        running: Option<(&Tensor<T>, &Tensor<T>)>,
        eps: f64,
    ) -> Result<BatchNormOutput<T>> {
        let [n, c, h, w] = x.dims4()?;
        ensure!(
            gamma.shape() == [c] && beta.shape() == [c],
            "batchnorm2d: affine parameters must have shape [{c}]"
        );
        let plane = h * w;
        let count = n * plane;
        let eps = T::from_f64(eps);
        let xd = x.data();

        let (mean, var, batch_stats) = match running {
            Some((rm, rv)) => {
                ensure!(
                    rm.shape() == [c] && rv.shape() == [c],
                    "batchnorm2d: running statistics must have shape [{c}]"
                );
                (rm.data().to_vec(), rv.data().to_vec(), false)
            }
            None => {
                ensure!(
                    count >= 2,
                    "batchnorm2d: batch statistics need at least 2 values per channel, got {count}"
                );
                let inv_count = T::one() / T::from_f64(count as f64);
                let stats: Vec<(T, T)> = (0..c)
                    .into_par_iter()
                    .map(|ch| {
                        let values = || (0..n).flat_map(move |b| xd[(b * c + ch) * plane..][..plane].iter().copied());
                        let mean = values().sum::<T>() * inv_count;
                        let var = values().map(|v| (v - mean) * (v - mean)).sum::<T>() * inv_count;
                        (mean, var)
                    })
                    .collect();
                let (mean, var) = stats.into_iter().unzip();
                (mean, var, true)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gd, bd) = (gamma.data(), beta.data());
        let mut xhat = vec![T::zero(); xd.len()];
        let mut data = vec![T::zero(); xd.len()];
        xhat.par_chunks_mut(plane)
            .zip(data.par_chunks_mut(plane))
            .enumerate()
            .for_each(|(idx, (xh, out))| {
                let ch = idx % c;
                let src = &xd[idx * plane..][..plane];
                for ((dst_h, dst), &v) in xh.iter_mut().zip(out.iter_mut()).zip(src) {
                    *dst_h = (v - mean[ch]) * inv_std[ch];
                    *dst = gd[ch] * *dst_h + bd[ch];
                }
            });

        let (sx, sg, sb) = (self.slot(x)?, self.slot(gamma)?, self.slot(beta)?);
        let op = (sx.is_some() || sg.is_some() || sb.is_some()).then(|| Op::BatchNorm {
            x: sx,
            gamma: sg,
            beta: sb,
            xhat,
            inv_std,
            gv: gamma.shared_data(),
            dims: [n, c, h, w],
            batch_stats,
        });
        let output = self.emit("batchnorm2d", x.shape().to_vec(), data, op)?;
        Ok(BatchNormOutput {
            output,
            batch_mean: batch_stats.then_some(mean),
            batch_var: batch_stats.then_some(var),
        })
    }

    /// 2×2 max pooling with stride 2. Ties route the gradient to the first
    /// maximal element in row-major order.
    pub fn maxpool2x2(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, c, h, w] = x.dims4()?;
        ensure!(
            h % 2 == 0 && w % 2 == 0 && h > 0 && w > 0,
            "maxpool2d: spatial size {h}x{w} must be even and non-empty"
        );
        let (data, argmax) = kernels::maxpool2x2(x.data(), n, c, h, w);
        let sx = self.slot(x)?;
        let op = sx.map(|x_ix| Op::MaxPool {
            x: x_ix,
            argmax,
            in_len: x.numel(),
        });
        self.emit("maxpool2d", vec![n, c, h / 2, w / 2], data, op)
    }

    /// Mean binary cross-entropy with both log arguments clamped to
    /// `[clamp, 1 − clamp]`. Gradients flow into `pred` only.
    pub fn bce(&mut self, pred: &Tensor<T>, target: &Tensor<T>, clamp: f64) -> Result<Tensor<T>> {
        ensure!(
            pred.shape() == target.shape(),
            "bce: prediction {:?} and target {:?} differ",
            pred.shape(),
            target.shape()
        );
        ensure!(pred.numel() > 0, "bce: empty input");
        let d = T::from_f64(clamp);
        let hi = T::one() - d;
        let total: T = pred
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let lp = p.max(d).min(hi).ln();
                let lq = (T::one() - p).max(d).min(hi).ln();
                -(t * lp + (T::one() - t) * lq)
            })
            .sum();
        let value = total / T::from_f64(pred.numel() as f64);
        let sp = self.slot(pred)?;
        let op = sp.map(|p| Op::Bce {
            p,
            pv: pred.shared_data(),
            tv: target.shared_data(),
            clamp: d,
        });
        self.emit("bce", vec![1], vec![value], op)
    }

    /// Soft dice loss `1 − (2Σpt + ε)/(Σp + Σt + ε)` per image, averaged
    /// over the batch axis. Gradients flow into `pred` only.
    pub fn dice_loss(&mut self, pred: &Tensor<T>, target: &Tensor<T>, smooth: f64) -> Result<Tensor<T>> {
        ensure!(
            pred.shape() == target.shape(),
            "dice_loss: prediction {:?} and target {:?} differ",
            pred.shape(),
            target.shape()
        );
        ensure!(pred.rank() >= 1 && pred.numel() > 0, "dice_loss: empty input");
        let batch = pred.shape()[0];
        let eps = T::from_f64(smooth);
        let terms = dice_terms(pred.data(), target.data(), batch);
        let two = T::from_f64(2.0);
        let total: T = terms
            .iter()
            .map(|&(spt, sp, st)| T::one() - (two * spt + eps) / (sp + st + eps))
            .sum();
        let value = total / T::from_f64(batch as f64);
        let sp = self.slot(pred)?;
        let op = sp.map(|p| Op::Dice {
            p,
            pv: pred.shared_data(),
            tv: target.shared_data(),
            smooth: eps,
            batch,
        });
        self.emit("dice_loss", vec![1], vec![value], op)
    }
}

/// Per image: (Σ p·t, Σ p, Σ t).
fn dice_terms<T: Scalar>(p: &[T], t: &[T], batch: usize) -> Vec<(T, T, T)> {
    let per = p.len() / batch;
    (0..batch)
        .map(|b| {
            let (pp, tt) = (&p[b * per..][..per], &t[b * per..][..per]);
            let mut acc = (T::zero(), T::zero(), T::zero());
            for (&pv, &tv) in pp.iter().zip(tt) {
                acc.0 = acc.0 + pv * tv;
                acc.1 = acc.1 + pv;
                acc.2 = acc.2 + tv;
            }
            acc
        })
        .collect()
}

/// For each flat input index, the flat output index after reducing `axes`
/// (kept as size-1 dimensions).
fn reduce_index_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut out_strides = vec![0usize; rank];
    let mut stride = 1;
    for d in (0..rank).rev() {
        if axes.contains(&d) {
            out_strides[d] = 0;
        } else {
            out_strides[d] = stride;
            stride *= shape[d];
        }
    }
    let numel: usize = shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    for _ in 0..numel {
        map.push(idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

/// Pushes the gradient of one node onto its inputs.
pub(super) fn backward_node<T: Scalar>(
    op: &Op<T>,
    shape: &[usize],
    g: &[T],
    grads: &mut [Option<Vec<T>>],
    nodes: &[Node<T>],
) {
    match op {
        Op::Leaf => {}
        Op::Add { a, b, bcast } => {
            if let Some(a) = a {
                accumulate(grads, *a, g.to_vec());
            }
            if let Some(b) = b {
                let gb = match bcast {
                    None => g.to_vec(),
                    Some(dims) => sum_over_channels(g, *dims, |_| T::one()),
                };
                accumulate(grads, *b, gb);
            }
        }
        Op::Mul { a, b, av, bv, bcast } => {
            if let Some(a) = a {
                let ga = match bcast {
                    None => g.iter().zip(bv.iter()).map(|(&g, &y)| g * y).collect(),
                    Some([_, c, h, w]) => {
                        let plane = h * w;
                        g.iter()
                            .enumerate()
                            .map(|(i, &gv)| gv * bv[(i / (c * plane)) * plane + i % plane])
                            .collect()
                    }
                };
                accumulate(grads, *a, ga);
            }
            if let Some(b) = b {
                let gb = match bcast {
                    None => g.iter().zip(av.iter()).map(|(&g, &x)| g * x).collect(),
                    Some(dims) => sum_over_channels(g, *dims, |i| av[i]),
                };
                accumulate(grads, *b, gb);
            }
        }
        Op::Scale { x, factor } => {
            accumulate(grads, *x, g.iter().map(|&v| v * *factor).collect());
        }
        Op::Relu { x, out } => {
            let gx = g
                .iter()
                .zip(out.iter())
                .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
                .collect();
            accumulate(grads, *x, gx);
        }
        Op::Sigmoid { x, out } => {
            let gx = g
                .iter()
                .zip(out.iter())
                .map(|(&g, &y)| g * y * (T::one() - y))
                .collect();
            accumulate(grads, *x, gx);
        }
        Op::Reduce {
            x,
            in_shape,
            axes,
            scale,
        } => {
            let map = reduce_index_map(in_shape, axes);
            let gx = map.iter().map(|&o| g[o] * *scale).collect();
            accumulate(grads, *x, gx);
        }
        Op::Reshape { x } => {
            debug_assert_eq!(nodes[*x].shape.iter().product::<usize>(), shape.iter().product::<usize>());
            accumulate(grads, *x, g.to_vec());
        }
        Op::Concat { a, b, dims, cb } => {
            let [n, ca, h, w] = *dims;
            let plane = h * w;
            let ct = ca + cb;
            if let Some(a) = a {
                let mut ga = Vec::with_capacity(n * ca * plane);
                for i in 0..n {
                    ga.extend_from_slice(&g[i * ct * plane..][..ca * plane]);
                }
                accumulate(grads, *a, ga);
            }
            if let Some(b) = b {
                let mut gb = Vec::with_capacity(n * cb * plane);
                for i in 0..n {
                    gb.extend_from_slice(&g[(i * ct + ca) * plane..][..cb * plane]);
                }
                accumulate(grads, *b, gb);
            }
        }
        Op::Linear { x, w, b, xv, wv, dims } => {
            let [n, cin, cout] = *dims;
            if let Some(x) = x {
                let mut gx = vec![T::zero(); n * cin];
                for i in 0..n {
                    for o in 0..cout {
                        let gv = g[i * cout + o];
                        for k in 0..cin {
                            gx[i * cin + k] = gx[i * cin + k] + gv * wv[o * cin + k];
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            if let Some(w) = w {
                let mut gw = vec![T::zero(); cout * cin];
                for i in 0..n {
                    for o in 0..cout {
                        let gv = g[i * cout + o];
                        for k in 0..cin {
                            gw[o * cin + k] = gw[o * cin + k] + gv * xv[i * cin + k];
                        }
                    }
                }
                accumulate(grads, *w, gw);
            }
            if let Some(b) = b {
                let mut gb = vec![T::zero(); cout];
                for i in 0..n {
                    for o in 0..cout {
                        gb[o] = gb[o] + g[i * cout + o];
                    }
                }
                accumulate(grads, *b, gb);
            }
        }
        Op::ChannelScale { x, s, xv, sv, dims } => {
            let [n, c, h, w] = *dims;
            let plane = h * w;
            if let Some(x) = x {
                let gx = g.iter().enumerate().map(|(i, &gv)| gv * sv[i / plane]).collect();
                accumulate(grads, *x, gx);
            }
            if let Some(s) = s {
                let gs = (0..n * c)
                    .map(|p| {
                        g[p * plane..][..plane]
                            .iter()
                            .zip(&xv[p * plane..][..plane])
                            .map(|(&a, &b)| a * b)
                            .sum()
                    })
                    .collect();
                accumulate(grads, *s, gs);
            }
        }
        Op::Conv {
            x,
            w,
            b,
            xv,
            wv,
            geom,
            transposed,
        } => {
            if !transposed {
                if let Some(x) = x {
                    accumulate(grads, *x, kernels::conv2d_grad_input(g, wv, geom));
                }
                if let Some(w) = w {
                    accumulate(grads, *w, kernels::conv2d_grad_weight(xv, g, geom));
                }
                if let Some(b) = b {
                    accumulate(grads, *b, kernels::channel_sums(g, geom.n, geom.c_out, geom.ho * geom.wo));
                }
            } else {
                if let Some(x) = x {
                    accumulate(grads, *x, kernels::conv2d_forward(g, wv, geom));
                }
                if let Some(w) = w {
                    accumulate(grads, *w, kernels::conv2d_grad_weight(g, xv, geom));
                }
                if let Some(b) = b {
                    accumulate(grads, *b, kernels::channel_sums(g, geom.n, geom.c_in, geom.h * geom.w));
                }
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            gv,
            dims,
            batch_stats,
        } => {
            let [n, c, h, w] = *dims;
            let plane = h * w;
            // Per channel: Σ dy and Σ dy·x̂.
            let mut sum_dy = vec![T::zero(); c];
            let mut sum_dy_xhat = vec![T::zero(); c];
            for bi in 0..n {
                for ch in 0..c {
                    let off = (bi * c + ch) * plane;
                    for (&dy, &xh) in g[off..off + plane].iter().zip(&xhat[off..off + plane]) {
                        sum_dy[ch] = sum_dy[ch] + dy;
                        sum_dy_xhat[ch] = sum_dy_xhat[ch] + dy * xh;
                    }
                }
            }
            if let Some(x) = x {
                let mut gx = vec![T::zero(); g.len()];
                let count = T::from_f64((n * plane) as f64);
                gx.par_chunks_mut(plane).enumerate().for_each(|(idx, dst)| {
                    let ch = idx % c;
                    let src = &g[idx * plane..][..plane];
                    let xh = &xhat[idx * plane..][..plane];
                    let k = gv[ch] * inv_std[ch];
                    if *batch_stats {
                        let (m1, m2) = (sum_dy[ch] / count, sum_dy_xhat[ch] / count);
                        for ((d, &dy), &xv) in dst.iter_mut().zip(src).zip(xh) {
                            *d = k * (dy - m1 - xv * m2);
                        }
                    } else {
                        for (d, &dy) in dst.iter_mut().zip(src) {
                            *d = k * dy;
                        }
                    }
                });
                accumulate(grads, *x, gx);
            }
            if let Some(gamma) = gamma {
                accumulate(grads, *gamma, sum_dy_xhat);
            }
            if let Some(beta) = beta {
                accumulate(grads, *beta, sum_dy);
            }
        }
        Op::MaxPool { x, argmax, in_len } => {
            let mut gx = vec![T::zero(); *in_len];
            for (&src, &gv) in argmax.iter().zip(g) {
                gx[src] = gx[src] + gv;
            }
            accumulate(grads, *x, gx);
        }
        Op::Bce { p, pv, tv, clamp } => {
            let scale = g[0] / T::from_f64(pv.len() as f64);
            let hi = T::one() - *clamp;
            let gp = pv
                .iter()
                .zip(tv.iter())
                .map(|(&p, &t)| {
                    let q = T::one() - p;
                    let mut d = T::zero();
                    if p > *clamp && p < hi {
                        d = d - t / p;
                    }
                    if q > *clamp && q < hi {
                        d = d + (T::one() - t) / q;
                    }
                    d * scale
                })
                .collect();
            accumulate(grads, *p, gp);
        }
        Op::Dice {
            p,
            pv,
            tv,
            smooth,
            batch,
        } => {
            let per = pv.len() / batch;
            let two = T::from_f64(2.0);
            let scale = g[0] / T::from_f64(*batch as f64);
            let terms = dice_terms(pv, tv, *batch);
            let mut gp = Vec::with_capacity(pv.len());
            for (b, &(spt, sp, st)) in terms.iter().enumerate() {
                let num = two * spt + *smooth;
                let den = sp + st + *smooth;
                let den2 = den * den;
                for &t in &tv[b * per..][..per] {
                    gp.push(-(two * t * den - num) / den2 * scale);
                }
            }
            accumulate(grads, *p, gp);
        }
    }
}

/// Sums a `(N,C,H,W)` gradient over channels into `(N,1,H,W)`, weighting each
/// element by `weight(flat_index)`.
fn sum_over_channels<T: Scalar>(g: &[T], dims: [usize; 4], weight: impl Fn(usize) -> T) -> Vec<T> {
    let [n, c, h, w] = dims;
    let plane = h * w;
    let mut out = vec![T::zero(); n * plane];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for i in 0..plane {
                out[b * plane + i] = out[b * plane + i] + g[off + i] * weight(off + i);
            }
        }
    }
    out
}
