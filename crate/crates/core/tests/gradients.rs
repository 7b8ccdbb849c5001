//! Central finite-difference checks of every differentiable op, every layer
//! and the whole network, in 64-bit.

mod common;
#[path = "common/grad_suite.rs"]
mod grad_suite;

use common::*;
use ddanet::autodiff::Graph;
use ddanet::Tensor;
use grad_suite::{describe, passes, Case, E2E_MIN_CHECKED, LAYER_TOL, MODEL_TOL};

fn assert_all(cases: Vec<Case>) {
    for (what, r) in &cases {
        assert!(passes(r, LAYER_TOL), "{}", describe(what, r, LAYER_TOL));
    }
}

#[test]
fn add_same_shape_and_broadcast() {
    assert_all(grad_suite::add());
}

#[test]
fn mul_same_shape_and_broadcast() {
    assert_all(grad_suite::mul());
}

#[test]
fn scale_relu_sigmoid() {
    assert_all(grad_suite::pointwise());
}

#[test]
fn reductions() {
    assert_all(grad_suite::reductions());
}

#[test]
fn reshape_and_concat() {
    assert_all(grad_suite::reshape_and_concat());
}

#[test]
fn linear_and_channel_scale() {
    assert_all(grad_suite::linear_and_channel_scale());
}

#[test]
fn conv2d_variants() {
    assert_all(grad_suite::conv2d());
}

#[test]
fn conv_transpose2d_variants() {
    assert_all(grad_suite::conv_transpose2d());
}

#[test]
fn batch_norm_train_and_eval() {
    assert_all(grad_suite::batch_norm());
}

#[test]
fn maxpool() {
    assert_all(grad_suite::maxpool());
}

#[test]
fn bce_and_dice_wrt_prediction() {
    assert_all(grad_suite::bce_and_dice());
}

#[test]
fn conv_layer_module() {
    assert_all(grad_suite::conv_layer());
}

#[test]
fn composite_conv_bn_relu_sum() {
    assert_all(grad_suite::conv_bn_relu());
}

#[test]
fn squeeze_excite_block() {
    assert_all(grad_suite::squeeze_excite());
}

#[test]
fn residual_blocks() {
    assert_all(grad_suite::residual());
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut r = rng(3);
    let x = random(&[1, 2, 4, 4], -1.0, 1.0, &mut r);
    let w = random(&[2, 2, 3, 3], -1.0, 1.0, &mut r);
    let pred_of = |g: &mut Graph<f64>, x: &Tensor<f64>, w: &Tensor<f64>| {
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let y = g.sigmoid(&y).unwrap();
        g.reshape(&y, &[2, 1, 4, 4]).unwrap()
    };
    let target = random(&[2, 1, 4, 4], 0.0, 1.0, &mut r).map(|v| v.round());
    let grad = |which: u8| {
        let mut g = Graph::new();
        let (xl, wl) = (g.leaf(&x), g.leaf(&w));
        let p = pred_of(&mut g, &xl, &wl);
        let a = g.bce(&p, &target, 1e-7).unwrap();
        let b = g.dice_loss(&p, &target, 1.0).unwrap();
        let loss = match which {
            0 => a,
            1 => b,
            _ => g.add(&a, &b).unwrap(),
        };
        let grads = g.backward(&loss).unwrap();
        grads.get(&wl).unwrap().data().to_vec()
    };
    let (ga, gb, gs) = (grad(0), grad(1), grad(2));
    for i in 0..gs.len() {
        assert!((gs[i] - (ga[i] + gb[i])).abs() <= 1e-14 * (1.0 + gs[i].abs()));
    }
}

#[test]
fn tiny_network_end_to_end() {
    for (seed, r) in grad_suite::end_to_end() {
        let what = format!("tiny DDANet seed {seed}");
        assert!(r.checked >= E2E_MIN_CHECKED, "{what}: too few coordinates checked: {r:?}");
        assert!(passes(&r, MODEL_TOL), "{}", describe(&what, &r, MODEL_TOL));
    }
}
