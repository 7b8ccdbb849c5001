use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// BT.601 luminance of a `(N, 3, H, W)` image, shape `(N, 1, H, W)`.
/// Each output is clamped into `[min(R,G,B), max(R,G,B)]` so rounding can
/// never push it outside the convex hull of the channels.
pub fn to_grayscale<T: Scalar>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = image.dims4()?;
    crate::error::ensure!(c == 3, "to_grayscale expects 3 channels, got {c}");
    let plane = h * w;
    let src = image.data();
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        let base = b * 3 * plane;
        for i in 0..plane {
            let [r, g, bl] = [0, 1, 2].map(|k| src[base + k * plane + i].as_f64());
            let y = LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * bl;
            let lo = r.min(g).min(bl);
            let hi = r.max(g).max(bl);
            out.push(T::from_f64(y.clamp(lo, hi)));
        }
    }
    Tensor::new(vec![n, 1, h, w], out)
}

/// Bilinear resize of every `(H, W)` plane with half-pixel centers: output
/// pixel `i` samples source coordinate `(i + 0.5)·H/out_h − 0.5`, clamped to
/// the image.
pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    crate::error::ensure!(out_h >= 1 && out_w >= 1, "resize target must be at least 1x1");
    if (h, w) == (out_h, out_w) {
        return Ok(x.detach());
    }
    let taps = |out: usize, src: usize| -> Vec<(usize, usize, f64)> {
        let scale = src as f64 / out as f64;
        (0..out)
            .map(|i| {
                let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = taps(out_h, h);
    let xs = taps(out_w, w);
    let src = x.data();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for p in 0..n * c {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let at = |y: usize, x: usize| plane[y * w + x].as_f64();
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(T::from_f64(top * (1.0 - fy) + bottom * fy));
            }
        }
    }
    Tensor::new(vec![n, c, out_h, out_w], out)
}

/// Resizes a binary mask bilinearly, then re-binarizes at 0.5.
pub fn resize_mask<T: Scalar>(mask: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let r = resize_bilinear(mask, out_h, out_w)?;
    Ok(binarize(&r, 0.5))
}

pub fn binarize<T: Scalar>(x: &Tensor<T>, threshold: f64) -> Tensor<T> {
    x.map(|v| if v.as_f64() >= threshold { T::one() } else { T::zero() })
}
