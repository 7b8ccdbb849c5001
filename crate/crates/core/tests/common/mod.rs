#![allow(dead_code)]

use ddanet::autodiff::Graph;
use ddanet::layers::{Module, TensorRole};
use ddanet::Tensor;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Loss = ddanet::Result<Tensor<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Grid that random test values are snapped to. With dyadic data and a
/// dyadic finite-difference step, linear ops evaluate exactly in f64, so
/// their central differences carry no roundoff at all.
pub const GRID: f64 = 1.0 / 4096.0;

pub fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = (rng.random_range(lo..hi) / GRID).round() * GRID;
            v.clamp(lo, hi)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[derive(Debug, Clone, Copy)]
pub struct FdConfig {
    pub step: f64,
    /// Check every coordinate when the inputs hold at most this many,
    /// otherwise this many sampled coordinates.
    pub max_coords: usize,
    pub seed: u64,
    /// 2: `(f(x+h) − f(x−h)) / 2h`; 4: the fourth-order five-point stencil.
    pub stencil: usize,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig {
            // 2^-17 ≈ 7.6e-6: the power of two nearest 1e-5, exact when added
            // to grid values.
            step: 1.0 / 131072.0,
            max_coords: 400,
            seed: 0,
            stencil: 2,
        }
    }
}

impl FdConfig {
    /// Five-point stencil at step 2^-10. Through batch norm the two-point
    /// difference at 1e-5 carries ~1e-10 of combined truncation and
    /// cancellation error, which swamps small gradients; this one stays
    /// near 1e-13.
    pub fn five_point() -> Self {
        FdConfig {
            step: 1.0 / 1024.0,
            stencil: 4,
            ..Self::default()
        }
    }
}

#[derive(Debug)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
    /// Coordinates where every trial step crossed a ReLU / max-pool / clamp
    /// boundary, so no one-sided-smooth difference exists.
    pub skipped: usize,
}

/// Compares reverse-mode gradients of `Σ r ⊙ f(inputs)` (fixed random `r`)
/// against central differences. Coordinates whose perturbation changes a
/// branch decision are retried with smaller steps, then skipped.
pub fn check_gradients(
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Graph<f64>, &[Tensor<f64>]) -> Loss,
    cfg: FdConfig,
) -> FdReport {
    let mut r = rng(cfg.seed ^ 0x5eed);
    let probe_shape = {
        let mut g = Graph::inference();
        f(&mut g, inputs).unwrap().shape().to_vec()
    };
    let weights = random(&probe_shape, -1.0, 1.0, &mut r);

    let eval = |xs: &[Tensor<f64>]| -> (Vec<f64>, u64) {
        let mut g = Graph::new();
        let leaves: Vec<Tensor<f64>> = xs.iter().map(|x| g.leaf(x)).collect();
        let y = f(&mut g, &leaves).unwrap();
        (y.data().to_vec(), g.kink_signature())
    };

    let mut g = Graph::new();
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|x| g.leaf(x)).collect();
    let y = f(&mut g, &leaves).unwrap();
    let proj = g.mul(&y, &weights).unwrap();
    let loss = g.sum_all(&proj).unwrap();
    let signature = g.kink_signature();
    let grads = g.backward(&loss).unwrap();
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| grads.get(l).expect("every input receives a gradient").data().to_vec())
        .collect();

    let mut coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    if coords.len() > cfg.max_coords {
        let picked = sample(&mut r, coords.len(), cfg.max_coords);
        coords = picked.into_iter().map(|k| coords[k]).collect();
    }

    let mut report = FdReport {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
        skipped: 0,
    };
    let mut xs = inputs.to_vec();
    for (i, j) in coords {
        let original = xs[i].data()[j];
        let mut numeric = None;
        for h in [cfg.step, cfg.step / 4.0, cfg.step / 16.0] {
            let mut sample_at = |offset: f64| {
                let at = original + offset;
                xs[i].data_mut()[j] = at;
                let (y, sig) = eval(&xs);
                xs[i].data_mut()[j] = original;
                (at, y, sig)
            };
            let (up, yp, sp) = sample_at(h);
            let (down, ym, sm) = sample_at(-h);
            let mut smooth = sp == signature && sm == signature;
            let far = if cfg.stencil == 4 {
                let (_, yp2, sp2) = sample_at(2.0 * h);
                let (_, ym2, sm2) = sample_at(-2.0 * h);
                smooth &= sp2 == signature && sm2 == signature;
                Some((yp2, ym2))
            } else {
                None
            };
            if !smooth {
                continue;
            }
            // Differencing per output before projecting keeps untouched
            // outputs at exactly zero and the roundoff local.
            let project = |a: &[f64], b: &[f64]| -> f64 {
                a.iter().zip(b).zip(weights.data()).map(|((p, m), w)| w * (p - m)).sum()
            };
            let near = project(&yp, &ym) / (up - down);
            numeric = Some(match far {
                None => near,
                Some((yp2, ym2)) => {
                    let wide = project(&yp2, &ym2) / (2.0 * (up - down));
                    (4.0 * near - wide) / 3.0
                }
            });
            break;
        }
        match numeric {
            None => report.skipped += 1,
            Some(n) => {
                let a = analytic[i][j];
                let e = rel_err(a, n);
                report.checked += 1;
                if e > report.max_rel_err {
                    report.max_rel_err = e;
                    report.worst = format!("input {i}[{j}]: analytic {a:e}, numeric {n:e}");
                }
            }
        }
    }
    report
}

/// Runs `check` for each seed and returns the worst report.
pub fn worst_over_seeds(seeds: std::ops::Range<u64>, check: impl Fn(u64) -> FdReport) -> FdReport {
    seeds
        .map(check)
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .expect("at least one seed")
}

/// Learnable tensors in visiting order.
pub fn params_of<M: Module<f64>>(m: &M) -> Vec<Tensor<f64>> {
    let mut out = Vec::new();
    m.visit("", &mut |_, t, role| {
        if role == TensorRole::Param {
            out.push(t.clone());
        }
    });
    out
}

/// A copy of `template` whose learnable tensors are replaced, in order.
pub fn with_params<M: Module<f64> + Clone>(template: &M, params: &[Tensor<f64>]) -> M {
    let mut m = template.clone();
    let mut it = params.iter();
    m.visit_mut("", &mut |_, t, role| {
        if role == TensorRole::Param {
            *t = it.next().expect("enough params").clone();
        }
    });
    assert!(it.next().is_none(), "too many params");
    m
}
