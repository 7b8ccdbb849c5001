use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Sample, Source};
use crate::error::{ensure, Result};
use crate::model::SIZE_MULTIPLE;
use crate::tensor::Tensor;

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

/// A few low-frequency sinusoids; values roughly in [−1, 1].
struct SmoothNoise {
    waves: Vec<(f64, f64, f64)>,
}

impl SmoothNoise {
    fn new(rng: &mut ChaCha8Rng, size: f64) -> Self {
        let waves = (0..3)
            .map(|_| {
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let freq = rng.random_range(1.0..3.0) * std::f64::consts::TAU / size;
                (freq * angle.cos(), freq * angle.sin(), rng.random_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        SmoothNoise { waves }
    }

    fn at(&self, y: f64, x: f64) -> f64 {
        self.waves.iter().map(|&(fy, fx, ph)| (fy * y + fx * x + ph).sin()).sum::<f64>() / 3.0
    }
}

/// One synthetic image and mask of side `size`, fully determined by `rng`.
///
/// Dark, softly mottled background with 1–3 bright textured ellipses lying
/// entirely inside the frame; the mask is exactly the ellipse union.
fn render(rng: &mut ChaCha8Rng, size: usize) -> (Tensor<f32>, Tensor<f32>) {
    let s = size as f64;
    let count = rng.random_range(1..=3);
    let ellipses: Vec<Ellipse> = (0..count)
        .map(|_| {
            let ry = rng.random_range(0.08..0.24) * s;
            let rx = rng.random_range(0.08..0.24) * s;
            let r = ry.max(rx);
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            Ellipse {
                cy: rng.random_range(r..s - r),
                cx: rng.random_range(r..s - r),
                ry,
                rx,
                cos: angle.cos(),
                sin: angle.sin(),
            }
        })
        .collect();
    let bg = [
        rng.random_range(0.02..0.05),
        rng.random_range(0.005..0.02),
        rng.random_range(0.01..0.03),
    ];
    let fg = [
        rng.random_range(0.95..1.0),
        rng.random_range(0.88..0.96),
        rng.random_range(0.75..0.9),
    ];
    let bg_noise = SmoothNoise::new(rng, s);
    let fg_noise = SmoothNoise::new(rng, s / 4.0);

    let plane = size * size;
    let mut image = vec![0.0f32; 3 * plane];
    let mut mask = vec![0.0f32; plane];
    for y in 0..size {
        for x in 0..size {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let i = y * size + x;
            let inside = ellipses.iter().any(|e| e.contains(py, px));
            let (base, amp, noise) = if inside {
                (fg, 0.03, &fg_noise)
            } else {
                (bg, 0.01, &bg_noise)
            };
            let n = noise.at(py, px) * amp;
            for k in 0..3 {
                image[k * plane + i] = (base[k] + n).clamp(0.0, 1.0) as f32;
            }
            mask[i] = inside as u8 as f32;
        }
    }
    (
        Tensor::from_parts(vec![1, 3, size, size], image),
        Tensor::from_parts(vec![1, 1, size, size], mask),
    )
}

/// `n` synthetic polyp-like images of `size × size`. Item `i` depends only
/// on `(seed, i, size)`, so prefixes agree across different `n`.
pub fn synthetic_blobs(n: usize, size: usize, seed: u64) -> Result<Dataset> {
    ensure!(n >= 1, "synthetic dataset needs at least one item");
    ensure!(
        size > 0 && size % SIZE_MULTIPLE == 0,
        "synthetic size {size} must be a positive multiple of {SIZE_MULTIPLE}"
    );
    let items = (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let (image, mask) = render(&mut rng, size);
            Sample {
                name: format!("synth_{i:05}"),
                image,
                mask,
            }
        })
        .collect();
    Ok(Dataset {
        name: format!("synthetic-{n}x{size}-seed{seed}"),
        source: Source::Synthetic { seed },
        items,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_prefix_stable() {
        let a = synthetic_blobs(3, 32, 9).unwrap();
        let b = synthetic_blobs(5, 32, 9).unwrap();
        for (x, y) in a.items.iter().zip(&b.items) {
            assert!(x.image.bit_eq(&y.image) && x.mask.bit_eq(&y.mask));
        }
        let c = synthetic_blobs(3, 32, 10).unwrap();
        assert!(!a.items[0].image.bit_eq(&c.items[0].image));
    }

    #[test]
    fn rejects_bad_size() {
        assert!(synthetic_blobs(1, 40, 0).is_err());
        assert!(synthetic_blobs(0, 32, 0).is_err());
    }
}
