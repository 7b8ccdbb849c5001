//! Straight-line oracles for the losses and metrics.
#![allow(dead_code)]

use ddanet::{ForwardOutput, Tensor};
use rand::Rng;

use super::common::random;

pub fn bce_oracle(p: &[f64], t: &[f64], delta: f64) -> f64 {
    let mut s = 0.0;
    for (&p, &t) in p.iter().zip(t) {
        let a = p.clamp(delta, 1.0 - delta);
        let b = (1.0 - p).clamp(delta, 1.0 - delta);
        s -= t * a.ln() + (1.0 - t) * b.ln();
    }
    s / p.len() as f64
}

pub fn dice_oracle(p: &[f64], t: &[f64], n: usize, eps: f64) -> f64 {
    let per = p.len() / n;
    let mut s = 0.0;
    for i in 0..n {
        let (pi, ti) = (&p[i * per..(i + 1) * per], &t[i * per..(i + 1) * per]);
        let inter: f64 = pi.iter().zip(ti).map(|(a, b)| a * b).sum();
        let sp: f64 = pi.iter().sum();
        let st: f64 = ti.iter().sum();
        s += 1.0 - (2.0 * inter + eps) / (sp + st + eps);
    }
    s / n as f64
}

pub fn random_output(r: &mut rand_chacha::ChaCha8Rng) -> (ForwardOutput<f64>, Tensor<f64>, Tensor<f64>) {
    let out = ForwardOutput {
        mask: random(&[2, 1, 6, 6], 0.01, 0.99, r),
        gray: random(&[2, 1, 6, 6], 0.01, 0.99, r),
        attention_maps: vec![],
        skips: vec![],
    };
    let mask = random(&[2, 1, 6, 6], 0.0, 1.0, r).map(f64::round);
    let gray = random(&[2, 1, 6, 6], 0.0, 1.0, r);
    (out, mask, gray)
}

/// Independent confusion counting: binarize both, then count each cell.
pub fn oracle_metrics(p: &[f64], g: &[f64]) -> [f64; 4] {
    let pb: Vec<bool> = p.iter().map(|&v| v >= 0.5).collect();
    let gb: Vec<bool> = g.iter().map(|&v| v >= 0.5).collect();
    let count = |a: bool, b: bool| pb.iter().zip(&gb).filter(|(x, y)| **x == a && **y == b).count() as f64;
    let (tp, fp, fn_) = (count(true, true), count(true, false), count(false, true));
    let safe = |n: f64, d: f64| if d == 0.0 { 1.0 } else { n / d };
    [
        safe(2.0 * tp, 2.0 * tp + fp + fn_),
        safe(tp, tp + fp + fn_),
        safe(tp, tp + fn_),
        safe(tp, tp + fp),
    ]
}

/// A random 16×16 mask pair; density varies per pair so that empty and
/// full masks occur too.
pub fn random_pair(r: &mut rand_chacha::ChaCha8Rng) -> (Tensor<f64>, Tensor<f64>) {
    let dp = [0.0, 0.02, 0.3, 0.5, 0.9, 1.0][r.random_range(0..6)];
    let dg = [0.0, 0.02, 0.3, 0.5, 0.9, 1.0][r.random_range(0..6)];
    let p = (0..256).map(|_| if r.random_bool(dp) { r.random_range(0.5..1.0) } else { r.random_range(0.0..0.5) }).collect();
    let g = (0..256).map(|_| r.random_bool(dg) as u8 as f64).collect();
    (
        Tensor::new(vec![1, 1, 16, 16], p).unwrap(),
        Tensor::new(vec![1, 1, 16, 16], g).unwrap(),
    )
}
