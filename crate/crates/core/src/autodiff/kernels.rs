//! Raw numeric kernels behind the differentiable ops.
//!
//! Every kernel that runs in parallel splits work so that each output element
//! is produced by exactly one task with a fixed accumulation order, so results
//! do not depend on the number of worker threads.

use rayon::prelude::*;

use crate::tensor::Scalar;

/// Geometry of a 2-D cross-correlation from `(n, c_in, h, w)` to
/// `(n, c_out, ho, wo)` with a `(c_out, c_in, kh, kw)` kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn in_len(&self) -> usize {
        self.n * self.c_in * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.n * self.c_out * self.ho * self.wo
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.c_in * self.kh * self.kw
    }

    /// Output positions `[lo, hi)` along one axis whose input coordinate
    /// `o * stride + k - pad` lands inside `0..extent`.
    #[inline]
    fn valid(&self, k: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > k { (self.pad - k).div_ceil(s) } else { 0 };
        if extent + self.pad <= k {
            return (0, 0);
        }
        let hi = ((extent - 1 + self.pad - k) / s + 1).min(out_extent);
        (lo.min(hi), hi)
    }
}

/// Cross-correlation without bias.
pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], wt: &[T], g: &ConvGeom) -> Vec<T> {
    let mut out = vec![T::zero(); g.out_len()];
    let plane_out = g.ho * g.wo;
    let plane_in = g.h * g.w;
    out.par_chunks_mut(plane_out).enumerate().for_each(|(idx, dst)| {
        let (b, oc) = (idx / g.c_out, idx % g.c_out);
        for ic in 0..g.c_in {
            let src = &x[(b * g.c_in + ic) * plane_in..][..plane_in];
            let kbase = (oc * g.c_in + ic) * g.kh * g.kw;
            for ky in 0..g.kh {
                let (oy0, oy1) = g.valid(ky, g.h, g.ho);
                for kx in 0..g.kw {
                    let wv = wt[kbase + ky * g.kw + kx];
                    let (ox0, ox1) = g.valid(kx, g.w, g.wo);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let row_out = &mut dst[oy * g.wo..][ox0..ox1];
                        let row_in = &src[iy * g.w..][..g.w];
                        if g.stride == 1 {
                            let ix0 = ox0 + kx - g.pad;
                            for (o, &v) in row_out.iter_mut().zip(&row_in[ix0..ix0 + (ox1 - ox0)]) {
                                *o = *o + wv * v;
                            }
                        } else {
                            for (j, o) in row_out.iter_mut().enumerate() {
                                let ix = (ox0 + j) * g.stride + kx - g.pad;
                                *o = *o + wv * row_in[ix];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Gradient of [`conv2d_forward`] with respect to its input; also the
/// forward pass of a transposed convolution.
pub(crate) fn conv2d_grad_input<T: Scalar>(gy: &[T], wt: &[T], g: &ConvGeom) -> Vec<T> {
    let mut gx = vec![T::zero(); g.in_len()];
    let plane_out = g.ho * g.wo;
    let plane_in = g.h * g.w;
    gx.par_chunks_mut(plane_in).enumerate().for_each(|(idx, dst)| {
        let (b, ic) = (idx / g.c_in, idx % g.c_in);
        for oc in 0..g.c_out {
            let src = &gy[(b * g.c_out + oc) * plane_out..][..plane_out];
            let kbase = (oc * g.c_in + ic) * g.kh * g.kw;
            for ky in 0..g.kh {
                let (oy0, oy1) = g.valid(ky, g.h, g.ho);
                for kx in 0..g.kw {
                    let wv = wt[kbase + ky * g.kw + kx];
                    let (ox0, ox1) = g.valid(kx, g.w, g.wo);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let row_g = &src[oy * g.wo..][ox0..ox1];
                        let row_dst = &mut dst[iy * g.w..][..g.w];
                        if g.stride == 1 {
                            let ix0 = ox0 + kx - g.pad;
                            for (d, &v) in row_dst[ix0..ix0 + (ox1 - ox0)].iter_mut().zip(row_g) {
                                *d = *d + wv * v;
                            }
                        } else {
                            for (j, &v) in row_g.iter().enumerate() {
                                let ix = (ox0 + j) * g.stride + kx - g.pad;
                                row_dst[ix] = row_dst[ix] + wv * v;
                            }
                        }
                    }
                }
            }
        }
    });
    gx
}

/// Gradient of [`conv2d_forward`] with respect to its kernel.
pub(crate) fn conv2d_grad_weight<T: Scalar>(x: &[T], gy: &[T], g: &ConvGeom) -> Vec<T> {
    let mut gw = vec![T::zero(); g.weight_len()];
    let plane_out = g.ho * g.wo;
    let plane_in = g.h * g.w;
    let per_oc = g.c_in * g.kh * g.kw;
    gw.par_chunks_mut(per_oc).enumerate().for_each(|(oc, dst)| {
        for b in 0..g.n {
            let gsrc = &gy[(b * g.c_out + oc) * plane_out..][..plane_out];
            for ic in 0..g.c_in {
                let xsrc = &x[(b * g.c_in + ic) * plane_in..][..plane_in];
                for ky in 0..g.kh {
                    let (oy0, oy1) = g.valid(ky, g.h, g.ho);
                    for kx in 0..g.kw {
                        let (ox0, ox1) = g.valid(kx, g.w, g.wo);
                        let mut acc = T::zero();
                        if ox0 < ox1 {
                            for oy in oy0..oy1 {
                                let iy = oy * g.stride + ky - g.pad;
                                let row_g = &gsrc[oy * g.wo..][ox0..ox1];
                                let row_x = &xsrc[iy * g.w..][..g.w];
                                if g.stride == 1 {
                                    let ix0 = ox0 + kx - g.pad;
                                    for (&a, &v) in row_g.iter().zip(&row_x[ix0..ix0 + (ox1 - ox0)]) {
                                        acc = acc + a * v;
                                    }
                                } else {
                                    for (j, &a) in row_g.iter().enumerate() {
                                        acc = acc + a * row_x[(ox0 + j) * g.stride + kx - g.pad];
                                    }
                                }
                            }
                        }
                        let slot = &mut dst[(ic * g.kh + ky) * g.kw + kx];
                        *slot = *slot + acc;
                    }
                }
            }
        }
    });
    gw
}

/// Adds `bias[c]` to every element of channel `c`.
pub(crate) fn add_channel_bias<T: Scalar>(out: &mut [T], bias: &[T], channels: usize, plane: usize) {
    out.par_chunks_mut(plane).enumerate().for_each(|(idx, dst)| {
        let b = bias[idx % channels];
        for v in dst {
            *v = *v + b;
        }
    });
}

/// Sums a `(n, c, plane)` buffer over `n` and `plane`, giving one value per channel.
pub(crate) fn channel_sums<T: Scalar>(g: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for b in 0..n {
        for (ch, slot) in out.iter_mut().enumerate() {
            let s: T = g[(b * c + ch) * plane..][..plane].iter().copied().sum();
            *slot = *slot + s;
        }
    }
    out
}

/// 2×2 / stride-2 max pooling. Returns the pooled values and, per output,
/// the flat input index of the first maximal element in scan order.
pub(crate) fn maxpool2x2<T: Scalar>(x: &[T], n: usize, c: usize, h: usize, w: usize) -> (Vec<T>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> ConvGeom {
        ConvGeom {
            n: 1,
            c_in: 1,
            h,
            w,
            c_out: 1,
            kh: k,
            kw: k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        }
    }

    #[test]
    fn valid_range_covers_padding() {
        let g = geom(4, 4, 3, 1, 1);
        assert_eq!(g.valid(0, 4, 4), (1, 4));
        assert_eq!(g.valid(1, 4, 4), (0, 4));
        assert_eq!(g.valid(2, 4, 4), (0, 3));
        let g = geom(8, 8, 4, 2, 1);
        assert_eq!(g.ho, 4);
        assert_eq!(g.valid(0, 8, 4), (1, 4));
        assert_eq!(g.valid(3, 8, 4), (0, 3));
    }

    #[test]
    fn maxpool_first_maximum_wins_ties() {
        let (v, a) = maxpool2x2(&[1.0f32; 4], 1, 1, 2, 2);
        assert_eq!(v, vec![1.0]);
        assert_eq!(a, vec![0]);
        let (v, a) = maxpool2x2(&[1.0f32, 2.0, 3.0, 4.0], 1, 1, 2, 2);
        assert_eq!(v, vec![4.0]);
        assert_eq!(a, vec![3]);
    }
}
