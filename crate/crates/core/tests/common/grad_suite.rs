#![allow(dead_code)]

//! Finite-difference cases shared by the gradient tests and the acceptance
//! report. Each case returns its worst report over all seeds.

use super::common::*;
use ddanet::autodiff::{Graph, Reduction};
use ddanet::layers::{BatchNorm2d, Conv2d, Ctx, Mode, ResidualBlock, SqueezeExcite};
use ddanet::loss::{total_loss, LossConfig};
use ddanet::model::{DDANet, ModelConfig};
use ddanet::Tensor;

pub const LAYER_TOL: f64 = 1e-6;
pub const MODEL_TOL: f64 = 1e-5;
pub const SEEDS: std::ops::Range<u64> = 0..10;
/// Sampled parameters per end-to-end seed, and the minimum that must land
/// away from every ReLU / max-pool kink.
pub const E2E_COORDS: usize = 120;
pub const E2E_MIN_CHECKED: usize = 50;

pub type Case = (String, FdReport);

pub fn passes(r: &FdReport, tol: f64) -> bool {
    r.checked > 0 && r.max_rel_err <= tol
}

pub fn describe(what: &str, r: &FdReport, tol: f64) -> String {
    format!(
        "{what}: max rel err {:e} (tol {tol:e}), {} checked, {} skipped; worst {}",
        r.max_rel_err, r.checked, r.skipped, r.worst
    )
}

fn cfg(seed: u64) -> FdConfig {
    FdConfig {
        seed,
        ..FdConfig::default()
    }
}

fn op_case(
    what: &str,
    make: impl Fn(&mut rand_chacha::ChaCha8Rng) -> Vec<Tensor<f64>>,
    f: impl Fn(&mut Graph<f64>, &[Tensor<f64>]) -> Loss + Copy,
) -> Case {
    let r = worst_over_seeds(SEEDS, |seed| {
        let inputs = make(&mut rng(seed));
        check_gradients(&inputs, f, cfg(seed))
    });
    (what.to_string(), r)
}

pub fn add() -> Vec<Case> {
    vec![
        op_case(
            "add",
            |r| vec![random(&[2, 3, 2, 2], -1.0, 1.0, r), random(&[2, 3, 2, 2], -1.0, 1.0, r)],
            |g, x| g.add(&x[0], &x[1]),
        ),
        op_case(
            "add broadcast",
            |r| vec![random(&[2, 3, 2, 2], -1.0, 1.0, r), random(&[2, 1, 2, 2], -1.0, 1.0, r)],
            |g, x| g.add(&x[0], &x[1]),
        ),
    ]
}

pub fn mul() -> Vec<Case> {
    vec![
        op_case(
            "mul",
            |r| vec![random(&[1, 2, 3, 3], -2.0, 2.0, r), random(&[1, 2, 3, 3], -2.0, 2.0, r)],
            |g, x| g.mul(&x[0], &x[1]),
        ),
        op_case(
            "mul broadcast",
            |r| vec![random(&[2, 3, 3, 2], -2.0, 2.0, r), random(&[2, 1, 3, 2], 0.0, 1.0, r)],
            |g, x| g.mul(&x[0], &x[1]),
        ),
    ]
}

pub fn pointwise() -> Vec<Case> {
    vec![
        op_case("scale", |r| vec![random(&[3, 4], -1.0, 1.0, r)], |g, x| g.scale(&x[0], -2.5)),
        op_case("relu", |r| vec![random(&[2, 2, 3, 3], -1.0, 1.0, r)], |g, x| g.relu(&x[0])),
        op_case("sigmoid", |r| vec![random(&[2, 2, 3, 3], -4.0, 4.0, r)], |g, x| g.sigmoid(&x[0])),
    ]
}

pub fn reductions() -> Vec<Case> {
    let mut out = Vec::new();
    for axes in [vec![0], vec![1], vec![2, 3], vec![0, 2], vec![0, 1, 2, 3]] {
        for kind in [Reduction::Sum, Reduction::Mean] {
            let a = axes.clone();
            let r = worst_over_seeds(SEEDS, |seed| {
                let x = random(&[2, 3, 2, 3], -1.0, 1.0, &mut rng(seed));
                check_gradients(&[x], |g, x| g.reduce(&x[0], kind, &a), cfg(seed))
            });
            out.push((format!("{kind:?} over {axes:?}"), r));
        }
    }
    out
}

pub fn reshape_and_concat() -> Vec<Case> {
    vec![
        op_case(
            "reshape",
            |r| vec![random(&[2, 3, 1, 1], -1.0, 1.0, r)],
            |g, x| g.reshape(&x[0], &[2, 3]),
        ),
        op_case(
            "concat",
            |r| vec![random(&[2, 2, 3, 3], -1.0, 1.0, r), random(&[2, 3, 3, 3], -1.0, 1.0, r)],
            |g, x| g.concat_channels(&x[0], &x[1]),
        ),
    ]
}

pub fn linear_and_channel_scale() -> Vec<Case> {
    vec![
        op_case(
            "linear",
            |r| {
                vec![
                    random(&[3, 5], -1.0, 1.0, r),
                    random(&[4, 5], -1.0, 1.0, r),
                    random(&[4], -1.0, 1.0, r),
                ]
            },
            |g, x| g.linear(&x[0], &x[1], &x[2]),
        ),
        op_case(
            "channel_scale",
            |r| vec![random(&[2, 3, 2, 2], -1.0, 1.0, r), random(&[2, 3], 0.0, 1.0, r)],
            |g, x| g.channel_scale(&x[0], &x[1]),
        ),
    ]
}

pub fn conv2d() -> Vec<Case> {
    let mut out = Vec::new();
    for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0), (3, 1, 0)] {
        let r = worst_over_seeds(SEEDS, |seed| {
            let mut r = rng(seed);
            let size = if (5 + 2 * pad - k) % stride == 0 { 5 } else { 6 };
            let inputs = vec![
                random(&[2, 2, size, size], -1.0, 1.0, &mut r),
                random(&[3, 2, k, k], -1.0, 1.0, &mut r),
                random(&[3], -1.0, 1.0, &mut r),
            ];
            check_gradients(
                &inputs,
                |g, x| g.conv2d(&x[0], &x[1], Some(&x[2]), stride, pad),
                cfg(seed),
            )
        });
        out.push((format!("conv2d k{k} s{stride} p{pad}"), r));
    }
    out
}

pub fn conv_transpose2d() -> Vec<Case> {
    let mut out = Vec::new();
    for (k, stride, pad) in [(4, 2, 1), (3, 1, 1), (2, 2, 0)] {
        let r = worst_over_seeds(SEEDS, |seed| {
            let mut r = rng(seed);
            let inputs = vec![
                random(&[2, 3, 3, 3], -1.0, 1.0, &mut r),
                random(&[3, 2, k, k], -1.0, 1.0, &mut r),
                random(&[2], -1.0, 1.0, &mut r),
            ];
            check_gradients(
                &inputs,
                |g, x| g.conv_transpose2d(&x[0], &x[1], Some(&x[2]), stride, pad),
                cfg(seed),
            )
        });
        out.push((format!("conv_transpose2d k{k} s{stride} p{pad}"), r));
    }
    out
}

pub fn batch_norm() -> Vec<Case> {
    let train = op_case(
        "batch_norm train",
        |r| {
            vec![
                random(&[2, 3, 3, 3], -2.0, 2.0, r),
                random(&[3], 0.5, 1.5, r),
                random(&[3], -1.0, 1.0, r),
            ]
        },
        |g, x| Ok(g.batch_norm(&x[0], &x[1], &x[2], None, 1e-5)?.output),
    );
    let mean = Tensor::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap();
    let var = Tensor::new(vec![3], vec![0.5, 1.5, 2.0]).unwrap();
    let eval = worst_over_seeds(SEEDS, |seed| {
        let mut r = rng(seed);
        let inputs = vec![
            random(&[2, 3, 3, 3], -2.0, 2.0, &mut r),
            random(&[3], 0.5, 1.5, &mut r),
            random(&[3], -1.0, 1.0, &mut r),
        ];
        check_gradients(
            &inputs,
            |g, x| Ok(g.batch_norm(&x[0], &x[1], &x[2], Some((&mean, &var)), 1e-5)?.output),
            cfg(seed),
        )
    });
    vec![train, ("batch_norm eval".into(), eval)]
}

pub fn maxpool() -> Vec<Case> {
    vec![op_case("maxpool", |r| vec![random(&[2, 2, 4, 6], -1.0, 1.0, r)], |g, x| g.maxpool2x2(&x[0]))]
}

pub fn bce_and_dice() -> Vec<Case> {
    let mut out = Vec::new();
    for (name, dice) in [("bce", false), ("dice", true)] {
        let r = worst_over_seeds(SEEDS, |seed| {
            let mut r = rng(seed);
            let pred = random(&[2, 1, 4, 4], 0.05, 0.95, &mut r);
            let target = random(&[2, 1, 4, 4], 0.0, 1.0, &mut r);
            let target = if dice { target.map(|v| v.round()) } else { target };
            check_gradients(
                &[pred],
                |g, x| {
                    if dice {
                        g.dice_loss(&x[0], &target, 1.0)
                    } else {
                        g.bce(&x[0], &target, 1e-7)
                    }
                },
                cfg(seed),
            )
        });
        out.push((name.to_string(), r));
    }
    out
}

pub fn conv_layer() -> Vec<Case> {
    let r = worst_over_seeds(SEEDS, |seed| {
        let mut r = rng(seed);
        let layer = Conv2d::<f64>::new(&mut r, 2, 3, 3, 1, 1, true);
        let x = random(&[1, 2, 5, 5], -1.0, 1.0, &mut r);
        let mut inputs = vec![x];
        inputs.extend(params_of(&layer));
        check_gradients(
            &inputs,
            |g, xs| {
                let l = with_params(&layer, &xs[1..]);
                l.forward(&mut Ctx::new(g, Mode::Train), &xs[0])
            },
            cfg(seed),
        )
    });
    vec![("Conv2d".into(), r)]
}

pub fn conv_bn_relu() -> Vec<Case> {
    let r = worst_over_seeds(SEEDS, |seed| {
        let mut r = rng(seed);
        // No bias: batch norm removes it, leaving an identically zero gradient.
        let conv = Conv2d::<f64>::new(&mut r, 2, 2, 3, 1, 1, false);
        let bn = BatchNorm2d::<f64>::new("bn", 2);
        let x = random(&[1, 2, 6, 6], -1.0, 1.0, &mut r);
        let mut inputs = vec![x];
        inputs.extend(params_of(&conv));
        inputs.extend(params_of(&bn));
        check_gradients(
            &inputs,
            |g, xs| {
                let c = with_params(&conv, &xs[1..2]);
                let b = with_params(&bn, &xs[2..4]);
                let mut ctx = Ctx::new(g, Mode::Train);
                let y = c.forward(&mut ctx, &xs[0])?;
                let y = b.forward(&mut ctx, &y)?;
                let y = ctx.graph.relu(&y)?;
                ctx.graph.sum_all(&y)
            },
            FdConfig {
                seed,
                ..FdConfig::five_point()
            },
        )
    });
    vec![("conv->bn->relu->sum".into(), r)]
}

pub fn squeeze_excite() -> Vec<Case> {
    let r = worst_over_seeds(SEEDS, |seed| {
        let mut r = rng(seed);
        let se = SqueezeExcite::<f64>::new(&mut r, 8, 4).unwrap();
        let x = random(&[2, 8, 3, 3], -1.0, 1.0, &mut r);
        let mut inputs = vec![x];
        inputs.extend(params_of(&se));
        check_gradients(
            &inputs,
            |g, xs| with_params(&se, &xs[1..]).forward(&mut Ctx::new(g, Mode::Train), &xs[0]),
            cfg(seed),
        )
    });
    vec![("SE block".into(), r)]
}

pub fn residual() -> Vec<Case> {
    let mut out = Vec::new();
    for (cin, cout) in [(3, 3), (2, 4)] {
        let r = worst_over_seeds(SEEDS, |seed| {
            let mut r = rng(seed);
            let block = ResidualBlock::<f64>::new(&mut r, "", cin, cout);
            let x = random(&[2, cin, 4, 4], -1.0, 1.0, &mut r);
            let mut inputs = vec![x];
            inputs.extend(params_of(&block));
            check_gradients(
                &inputs,
                |g, xs| with_params(&block, &xs[1..]).forward(&mut Ctx::new(g, Mode::Train), &xs[0]),
                cfg(seed),
            )
        });
        out.push((format!("residual {cin}->{cout}"), r));
    }
    out
}

/// Every op and layer case.
pub fn all_layer_cases() -> Vec<Case> {
    [
        add,
        mul,
        pointwise,
        reductions,
        reshape_and_concat,
        linear_and_channel_scale,
        conv2d,
        conv_transpose2d,
        batch_norm,
        maxpool,
        bce_and_dice,
        conv_layer,
        conv_bn_relu,
        squeeze_excite,
        residual,
    ]
    .iter()
    .flat_map(|f| f())
    .collect()
}

/// Gradients of the total loss of the tiny network with respect to randomly
/// sampled parameters.
pub fn end_to_end_report(seed: u64, coords: usize) -> FdReport {
    let config = ModelConfig::tiny().with_input_size(16, 16);
    let model = DDANet::<f64>::build(&config, seed).unwrap();
    let mut r = rng(seed + 100);
    let x = random(&[1, 3, 16, 16], 0.0, 1.0, &mut r);
    let mask = random(&[1, 1, 16, 16], 0.0, 1.0, &mut r).map(|v| v.round());
    let gray = ddanet::data::to_grayscale(&x).unwrap();
    let loss_cfg = LossConfig::default();
    check_gradients(
        &params_of(&model),
        |g, ps| {
            let m = with_params(&model, ps);
            let mut ctx = Ctx::new(g, Mode::Train);
            let out = m.forward(&mut ctx, &x)?;
            Ok(total_loss(ctx.graph, &out, &mask, &gray, &loss_cfg)?.total)
        },
        FdConfig {
            seed,
            max_coords: coords,
            ..FdConfig::five_point()
        },
    )
}

/// Per-seed end-to-end reports.
pub fn end_to_end() -> Vec<(u64, FdReport)> {
    SEEDS.map(|seed| (seed, end_to_end_report(seed, E2E_COORDS))).collect()
}
