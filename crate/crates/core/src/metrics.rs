//! Pixel-level segmentation metrics and throughput measurement.

use std::fmt::Write as _;
use std::time::Instant;

use crate::error::{ensure, Result};
use crate::model::DDANet;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

/// Metrics for one image. Every 0/0 case counts as 1.0, so an empty
/// prediction on an empty mask is perfect.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageMetrics {
    pub dsc: f64,
    pub iou: f64,
    pub recall: f64,
    pub precision: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

impl Confusion {
    pub fn metrics(&self) -> ImageMetrics {
        let Confusion { tp, fp, fn_, .. } = *self;
        ImageMetrics {
            dsc: ratio(2 * tp, 2 * tp + fp + fn_),
            iou: ratio(tp, tp + fp + fn_),
            recall: ratio(tp, tp + fn_),
            precision: ratio(tp, tp + fp),
        }
    }
}

/// Pixel counts for one image; `pred ≥ threshold` and `gt ≥ 0.5` are positive.
pub fn confusion<T: Scalar>(pred: &[T], gt: &[T], threshold: f64) -> Confusion {
    let mut c = Confusion::default();
    for (p, g) in pred.iter().zip(gt) {
        match (p.as_f64() >= threshold, g.as_f64() >= 0.5) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

/// Per-image metrics for a batch `(N, 1, H, W)` (any shape whose first axis
/// is the image index).
pub fn segmentation_metrics<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, threshold: f64) -> Result<Vec<ImageMetrics>> {
    ensure!(
        pred.shape() == gt.shape(),
        "prediction {:?} and ground truth {:?} differ in shape",
        pred.shape(),
        gt.shape()
    );
    ensure!(pred.rank() >= 1 && pred.shape()[0] > 0, "metrics need at least one image");
    let per = pred.numel() / pred.shape()[0];
    Ok(pred
        .data()
        .chunks(per.max(1))
        .zip(gt.data().chunks(per.max(1)))
        .map(|(p, g)| confusion(p, g, threshold).metrics())
        .collect())
}

/// Dataset-level report: means over images plus measured throughput.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub dsc: f64,
    pub miou: f64,
    pub recall: f64,
    pub precision: f64,
    pub fps: f64,
    pub n_images: usize,
}

impl MetricsReport {
    pub fn from_images(images: &[ImageMetrics], fps: f64) -> Result<Self> {
        ensure!(!images.is_empty(), "no images to aggregate");
        let n = images.len() as f64;
        let mean = |f: fn(&ImageMetrics) -> f64| images.iter().map(f).sum::<f64>() / n;
        Ok(MetricsReport {
            dsc: mean(|m| m.dsc),
            miou: mean(|m| m.iou),
            recall: mean(|m| m.recall),
            precision: mean(|m| m.precision),
            fps,
            n_images: images.len(),
        })
    }

    /// Flat JSON object, floats with six decimals.
    pub fn to_json(&self) -> String {
        let mut s = String::from("{");
        for (key, v) in [
            ("dsc", self.dsc),
            ("miou", self.miou),
            ("recall", self.recall),
            ("precision", self.precision),
            ("fps", self.fps),
        ] {
            let _ = write!(s, "\"{key}\": {v:.6}, ");
        }
        let _ = write!(s, "\"n_images\": {}}}", self.n_images);
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "dsc {:.4}  miou {:.4}  recall {:.4}  precision {:.4}  fps {:.2}  n {}",
            self.dsc, self.miou, self.recall, self.precision, self.fps, self.n_images
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub fps: f64,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub n_timed: usize,
    pub size: (usize, usize),
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        format!(
            "{{\"fps\": {:.6}, \"mean_ms\": {:.6}, \"p50_ms\": {:.6}, \"p95_ms\": {:.6}, \"n_timed\": {}, \"height\": {}, \"width\": {}}}",
            self.fps, self.mean_ms, self.p50_ms, self.p95_ms, self.n_timed, self.size.0, self.size.1
        )
    }
}

/// Times `n_timed` single-image eval forwards after `n_warmup` untimed ones.
pub fn fps_benchmark<T: Scalar>(
    model: &DDANet<T>,
    size: (usize, usize),
    n_warmup: usize,
    n_timed: usize,
) -> Result<BenchReport> {
    ensure!(n_timed > 0, "n_timed must be at least 1");
    let (h, w) = size;
    let x = Tensor::full(vec![1, model.config().in_channels, h, w], T::from_f64(0.5));
    for _ in 0..n_warmup {
        model.predict(&x)?;
    }
    let mut lat = Vec::with_capacity(n_timed);
    let start = Instant::now();
    for _ in 0..n_timed {
        let t0 = Instant::now();
        model.predict(&x)?;
        lat.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let total = start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
    lat.sort_by(f64::total_cmp);
    let pct = |q: f64| lat[((lat.len() - 1) as f64 * q).round() as usize];
    Ok(BenchReport {
        fps: n_timed as f64 / total,
        mean_ms: lat.iter().sum::<f64>() / n_timed as f64,
        p50_ms: pct(0.5),
        p95_ms: pct(0.95),
        n_timed,
        size,
    })
}
