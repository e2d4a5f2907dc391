mod common;

use cae_cluster::nn::{ConvTranspose2d, Conv2d, Dense, Layer, Sequential};
use cae_cluster::Tensor;
use common::*;

/// Checks input and parameter gradients of `layer` against central
/// differences of the scalar objective `<layer(x), r>`.
fn check_layer(layer: &Layer, x: &Tensor, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let (y, ctx) = layer.forward(x).unwrap();
    let r = random_tensor(y.shape(), &mut rng);
    let grads = layer.backward(&r, &ctx).unwrap();
    assert_eq!(grads.input.shape(), x.shape());

    let objective = |l: &Layer, input: &Tensor| l.apply(input).unwrap().dot(&r);
    let num_in = numeric_gradient(x, |probe| objective(layer, probe));
    let mut worst = relative_error(&grads.input, &num_in);

    for (pi, analytic) in grads.params.iter().enumerate() {
        assert_eq!(analytic.shape(), layer.params()[pi].shape());
        let base = layer.params()[pi].clone();
        let num = numeric_gradient(&base, |probe| {
            let mut l = layer.clone();
            *l.params_mut()[pi] = probe.clone();
            objective(&l, x)
        });
        worst = worst.max(relative_error(analytic, &num));
    }
    worst
}

#[test]
fn conv_matches_six_loop_reference() {
    let mut rng = rng(1);
    let conv = Conv2d::new(2, 4, 3, 2, 1, &mut rng);
    let mut bias = random_tensor(&[4], &mut rng);
    bias.scale(0.3);
    let conv = Conv2d::from_parts(conv.weight().clone(), bias, 2, 1).unwrap();
    let x = random_tensor(&[2, 2, 8, 8], &mut rng);
    let out = Layer::Conv2d(conv.clone()).apply(&x).unwrap();
    assert_eq!(out.shape(), &[2, 4, 4, 4]);
    let reference = naive_conv(&x, conv.weight(), conv.bias(), 2, 1);
    assert!(out.max_abs_diff(&reference) < 1e-12);
}

#[test]
fn deconv_matches_scatter_reference() {
    let mut rng = rng(2);
    for (k, s, p, op, h) in [(3, 2, 1, 1, 4), (5, 2, 2, 1, 3), (5, 2, 2, 0, 4), (3, 1, 1, 0, 5)] {
        let d = ConvTranspose2d::new(3, 2, k, s, p, op, &mut rng);
        let b = random_tensor(&[2], &mut rng);
        let d = ConvTranspose2d::from_parts(d.weight().clone(), b, s, p, op).unwrap();
        let y = random_tensor(&[2, 3, h, h], &mut rng);
        let out = Layer::ConvTranspose2d(d.clone()).apply(&y).unwrap();
        let oh = (h - 1) * s + k + op - 2 * p;
        assert_eq!(out.shape(), &[2, 2, oh, oh]);
        let reference = naive_deconv(&y, d.weight(), d.bias(), s, p, oh, oh);
        assert!(out.max_abs_diff(&reference) < 1e-12);
    }
}

#[test]
fn conv_and_deconv_are_adjoint() {
    let mut rng = rng(3);
    for (cin, cout, k, s, p, h) in [(1, 3, 5, 2, 2, 7), (2, 4, 3, 2, 1, 8), (3, 2, 3, 1, 1, 5), (2, 2, 5, 2, 2, 16)] {
        let conv = Conv2d::new(cin, cout, k, s, p, &mut rng);
        let conv = Conv2d::from_parts(conv.weight().clone(), Tensor::zeros(&[cout]), s, p).unwrap();
        let x = random_tensor(&[1, cin, h, h], &mut rng);
        let cx = Layer::Conv2d(conv.clone()).apply(&x).unwrap();
        let oh = cx.shape()[2];
        // pick the output padding that lands back on h
        let op = h + 2 * p - ((oh - 1) * s + k);
        let deconv =
            ConvTranspose2d::from_parts(conv.weight().clone(), Tensor::zeros(&[cin]), s, p, op).unwrap();
        let y = random_tensor(cx.shape(), &mut rng);
        let dy = Layer::ConvTranspose2d(deconv).apply(&y).unwrap();
        assert_eq!(dy.shape(), x.shape());
        let lhs = cx.dot(&y);
        let rhs = x.dot(&dy);
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }
}

#[test]
fn conv_gradients_on_5x5_inputs() {
    let mut rng = rng(4);
    for (i, (k, s, p)) in [(3, 1, 1), (3, 2, 1), (5, 2, 2), (2, 1, 0)].into_iter().enumerate() {
        let layer = Layer::Conv2d(Conv2d::new(2, 3, k, s, p, &mut rng));
        let x = random_tensor(&[2, 2, 5, 5], &mut rng);
        let err = check_layer(&layer, &x, 100 + i as u64);
        assert!(err <= FD_TOL, "conv k={k} s={s} p={p}: {err}");
    }
}

#[test]
fn deconv_gradients() {
    let mut rng = rng(5);
    for (i, (k, s, p, op)) in [(3, 2, 1, 1), (5, 2, 2, 1), (3, 1, 1, 0)].into_iter().enumerate() {
        let layer = Layer::ConvTranspose2d(ConvTranspose2d::new(3, 2, k, s, p, op, &mut rng));
        let x = random_tensor(&[2, 3, 3, 3], &mut rng);
        let err = check_layer(&layer, &x, 200 + i as u64);
        assert!(err <= FD_TOL, "deconv k={k} s={s}: {err}");
    }
}

#[test]
fn dense_relu_and_shape_layer_gradients() {
    let mut rng = rng(6);
    let dense = Layer::Dense(Dense::new(7, 4, &mut rng));
    let x = random_tensor(&[3, 7], &mut rng);
    assert!(check_layer(&dense, &x, 300) <= FD_TOL);

    // keep inputs away from the kink so differences stay one-sided-free
    let mut x = random_tensor(&[2, 3, 4], &mut rng);
    for v in x.data_mut() {
        if v.abs() < 1e-3 {
            *v = 0.5;
        }
    }
    assert!(check_layer(&Layer::relu(), &x, 301) <= FD_TOL);
    assert!(check_layer(&Layer::flatten(), &x, 302) <= FD_TOL);
    let flat = random_tensor(&[2, 12], &mut rng);
    assert!(check_layer(&Layer::reshape(vec![3, 2, 2]), &flat, 303) <= FD_TOL);
}

#[test]
fn shapes_round_trip_through_backward() {
    let mut rng = rng(7);
    for h in [5usize, 6, 7, 8, 9, 12, 16] {
        for (k, s) in [(3, 2), (5, 2), (3, 1)] {
            let p = k / 2;
            let conv = Layer::Conv2d(Conv2d::new(1, 2, k, s, p, &mut rng));
            let x = random_tensor(&[2, 1, h, h], &mut rng);
            let (y, ctx) = conv.forward(&x).unwrap();
            let g = conv.backward(&y, &ctx).unwrap();
            assert_eq!(g.input.shape(), x.shape());
            let op = h + 2 * p - ((y.shape()[2] - 1) * s + k);
            let deconv = Layer::ConvTranspose2d(ConvTranspose2d::new(2, 1, k, s, p, op, &mut rng));
            let (z, ctx) = deconv.forward(&y).unwrap();
            assert_eq!(z.shape(), x.shape());
            let g = deconv.backward(&z, &ctx).unwrap();
            assert_eq!(g.input.shape(), y.shape());
        }
    }
}

#[test]
fn sequential_backward_matches_finite_differences() {
    let mut rng = rng(8);
    let net = Sequential::new(vec![
        Layer::Conv2d(Conv2d::new(1, 2, 3, 2, 1, &mut rng)),
        Layer::relu(),
        Layer::flatten(),
        Layer::Dense(Dense::new(2 * 3 * 3, 3, &mut rng)),
    ]);
    let x = random_tensor(&[2, 1, 5, 5], &mut rng);
    let (y, ctxs) = net.forward(&x).unwrap();
    let r = random_tensor(y.shape(), &mut rng);
    let (gx, _) = net.backward(&r, &ctxs).unwrap();
    let num = numeric_gradient(&x, |p| net.apply(p).unwrap().dot(&r));
    assert!(relative_error(&gx, &num) <= FD_TOL);
}

#[test]
fn forward_is_deterministic() {
    let build = || {
        let mut rng = rng(9);
        Layer::Conv2d(Conv2d::new(1, 4, 5, 2, 2, &mut rng))
    };
    let mut r = rng(10);
    let x = random_tensor(&[3, 1, 9, 9], &mut r);
    let a = build().apply(&x).unwrap();
    let b = build().apply(&x).unwrap();
    assert_eq!(a.data(), b.data());
}
