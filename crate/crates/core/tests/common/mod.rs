#![allow(dead_code)]

pub mod oracles;

use lesion_cascade::layers::{
    batchnorm2d_backward, batchnorm2d_forward, concat_channels, conv2d, conv2d_backward, conv2d_transpose,
    conv2d_transpose_backward, maxpool2d, maxpool2d_backward, relu, relu_backward, sigmoid, sigmoid_backward,
    split_channels, BatchNormParams, ConvParams, Mode, BN_EPS,
};
use lesion_cascade::losses::{bce_loss, dice_loss, tversky_loss, TverskyParams};
use lesion_cascade::{Shape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const MAX_RELATIVE_ERROR: f64 = 1e-4;
pub const INSTANCES: usize = 20;

pub fn tensor(shape: Shape, values: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(shape, values).unwrap()
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// `‖a − n‖ / (‖a‖ + ‖n‖)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt() + numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` w.r.t. every entry of every input, compared
/// against `analytic` input by input; returns the worst relative error.
pub fn compare(inputs: &[Vec<f64>], analytic: &[Vec<f64>], f: impl Fn(&[Vec<f64>]) -> f64) -> f64 {
    let mut worst = 0f64;
    let mut work = inputs.to_vec();
    for (k, a) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.len()];
        for i in 0..a.len() {
            let orig = work[k][i];
            work[k][i] = orig + STEP;
            let up = f(&work);
            work[k][i] = orig - STEP;
            let down = f(&work);
            work[k][i] = orig;
            numeric[i] = (up - down) / (2.0 * STEP);
        }
        worst = worst.max(relative_error(a, &numeric));
    }
    worst
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Worst relative error per checked component over `INSTANCES` random cases each.
pub struct GradReport {
    pub name: &'static str,
    pub instances: usize,
    pub worst: f64,
}

fn run(name: &'static str, seed: u64, mut one: impl FnMut(&mut ChaCha8Rng) -> f64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let worst = (0..INSTANCES).map(|_| one(&mut rng)).fold(0.0, f64::max);
    GradReport { name, instances: INSTANCES, worst }
}

pub fn check_conv(rng: &mut ChaCha8Rng) -> f64 {
    let (n, ci, co) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
    let k = if rng.random_bool(0.5) { 3 } else { 1 };
    let (h, w) = (rng.random_range(2..=5), rng.random_range(2..=5));
    let xs = Shape::new(n, ci, h, w);
    let ws = Shape::new(co, ci, k, k);
    let bs = Shape::new(1, co, 1, 1);
    let ys = Shape::new(n, co, h, w);
    let inputs = vec![uniform(rng, xs.len(), -1.0, 1.0), uniform(rng, ws.len(), -1.0, 1.0), uniform(rng, co, -1.0, 1.0)];
    let r = uniform(rng, ys.len(), -1.0, 1.0);
    let build = |v: &[Vec<f64>]| {
        (tensor(xs, v[0].clone()), ConvParams { weight: tensor(ws, v[1].clone()), bias: tensor(bs, v[2].clone()) })
    };
    let (x, p) = build(&inputs);
    let (dx, dw, db) = conv2d_backward(&x, &p, &tensor(ys, r.clone())).unwrap();
    compare(&inputs, &[dx.values, dw, db], |v| {
        let (x, p) = build(v);
        dot(&conv2d(&x, &p).unwrap().values, &r)
    })
}

pub fn check_conv_transpose(rng: &mut ChaCha8Rng) -> f64 {
    let (n, ci, co) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
    let (h, w) = (rng.random_range(1..=4), rng.random_range(1..=4));
    let xs = Shape::new(n, ci, h, w);
    let ws = Shape::new(ci, co, 2, 2);
    let bs = Shape::new(1, co, 1, 1);
    let ys = Shape::new(n, co, 2 * h, 2 * w);
    let inputs = vec![uniform(rng, xs.len(), -1.0, 1.0), uniform(rng, ws.len(), -1.0, 1.0), uniform(rng, co, -1.0, 1.0)];
    let r = uniform(rng, ys.len(), -1.0, 1.0);
    let build = |v: &[Vec<f64>]| {
        (tensor(xs, v[0].clone()), ConvParams { weight: tensor(ws, v[1].clone()), bias: tensor(bs, v[2].clone()) })
    };
    let (x, p) = build(&inputs);
    let (dx, dw, db) = conv2d_transpose_backward(&x, &p, &tensor(ys, r.clone())).unwrap();
    compare(&inputs, &[dx.values, dw, db], |v| {
        let (x, p) = build(v);
        dot(&conv2d_transpose(&x, &p).unwrap().values, &r)
    })
}

pub fn check_maxpool(rng: &mut ChaCha8Rng) -> f64 {
    let xs = Shape::new(rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=5), rng.random_range(1..=5));
    // distinct values spaced far beyond the step keep every window's argmax stable
    let mut ranks: Vec<usize> = (0..xs.len()).collect();
    ranks.shuffle(rng);
    let x: Vec<f64> = ranks.iter().map(|r| *r as f64 * 0.01 - 0.3 + rng.random_range(0.0..1e-3)).collect();
    let (y, arg) = maxpool2d(&tensor(xs, x.clone()));
    let r = uniform(rng, y.values.len(), -1.0, 1.0);
    let dx = maxpool2d_backward(xs, &arg, &tensor(y.shape, r.clone()));
    compare(&[x], &[dx.values], |v| dot(&maxpool2d(&tensor(xs, v[0].clone())).0.values, &r))
}

pub fn check_batchnorm(rng: &mut ChaCha8Rng, mode: Mode) -> f64 {
    let c = rng.random_range(1..=3);
    let xs = Shape::new(rng.random_range(1..=3), c, rng.random_range(1..=4), rng.random_range(2..=4));
    let inputs = vec![uniform(rng, xs.len(), -2.0, 2.0), uniform(rng, c, 0.5, 1.5), uniform(rng, c, -0.5, 0.5)];
    let running_mean = uniform(rng, c, -0.5, 0.5);
    let running_var = uniform(rng, c, 0.5, 2.0);
    let r = uniform(rng, xs.len(), -1.0, 1.0);
    let cs = Shape::new(1, c, 1, 1);
    let params = |v: &[Vec<f64>]| BatchNormParams {
        gamma: tensor(cs, v[1].clone()),
        beta: tensor(cs, v[2].clone()),
        running_mean: running_mean.clone(),
        running_var: running_var.clone(),
    };
    let p = params(&inputs);
    let (_, cache, _) = batchnorm2d_forward(&tensor(xs, inputs[0].clone()), &p, mode, BN_EPS).unwrap();
    let (dx, dg, db) = batchnorm2d_backward(&p, &cache, &tensor(xs, r.clone()));
    compare(&inputs, &[dx.values, dg, db], |v| {
        let (y, _, _) = batchnorm2d_forward(&tensor(xs, v[0].clone()), &params(v), mode, BN_EPS).unwrap();
        dot(&y.values, &r)
    })
}

pub fn check_relu(rng: &mut ChaCha8Rng) -> f64 {
    let xs = Shape::new(rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=4));
    // keep inputs off the kink
    let x: Vec<f64> = (0..xs.len())
        .map(|_| {
            let m = rng.random_range(0.01..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    let r = uniform(rng, xs.len(), -1.0, 1.0);
    let dx = relu_backward(&tensor(xs, x.clone()), &tensor(xs, r.clone()));
    compare(&[x], &[dx.values], |v| dot(&relu(&tensor(xs, v[0].clone())).values, &r))
}

pub fn check_sigmoid(rng: &mut ChaCha8Rng) -> f64 {
    let xs = Shape::new(rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=4));
    let x = uniform(rng, xs.len(), -6.0, 6.0);
    let r = uniform(rng, xs.len(), -1.0, 1.0);
    let y = sigmoid(&tensor(xs, x.clone()));
    let dx = sigmoid_backward(&y, &tensor(xs, r.clone()));
    compare(&[x], &[dx.values], |v| dot(&sigmoid(&tensor(xs, v[0].clone())).values, &r))
}

pub fn check_concat(rng: &mut ChaCha8Rng) -> f64 {
    let (n, h, w) = (rng.random_range(1..=2), rng.random_range(1..=4), rng.random_range(1..=4));
    let (ca, cb) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let (sa, sb) = (Shape::new(n, ca, h, w), Shape::new(n, cb, h, w));
    let inputs = vec![uniform(rng, sa.len(), -1.0, 1.0), uniform(rng, sb.len(), -1.0, 1.0)];
    let r = uniform(rng, n * (ca + cb) * h * w, -1.0, 1.0);
    let (ga, gb) = split_channels(&tensor(Shape::new(n, ca + cb, h, w), r.clone()), ca);
    compare(&inputs, &[ga.values, gb.values], |v| {
        dot(&concat_channels(&tensor(sa, v[0].clone()), &tensor(sb, v[1].clone())).unwrap().values, &r)
    })
}

fn loss_case(rng: &mut ChaCha8Rng) -> (Shape, Vec<f64>, Vec<f64>) {
    let s = Shape::new(rng.random_range(1..=3), 1, rng.random_range(1..=5), rng.random_range(1..=5));
    let pred = uniform(rng, s.len(), 0.05, 0.95);
    let target = (0..s.len()).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
    (s, pred, target)
}

pub fn check_bce(rng: &mut ChaCha8Rng) -> f64 {
    let (s, p, t) = loss_case(rng);
    let tt = tensor(s, t);
    let (_, g) = bce_loss(&tensor(s, p.clone()), &tt).unwrap();
    compare(&[p], &[g.values], |v| bce_loss(&tensor(s, v[0].clone()), &tt).unwrap().0)
}

pub fn check_dice(rng: &mut ChaCha8Rng) -> f64 {
    let (s, p, t) = loss_case(rng);
    let smooth = rng.random_range(0.1..2.0);
    let tt = tensor(s, t);
    let (_, g) = dice_loss(&tensor(s, p.clone()), &tt, smooth).unwrap();
    compare(&[p], &[g.values], |v| dice_loss(&tensor(s, v[0].clone()), &tt, smooth).unwrap().0)
}

pub fn check_tversky(rng: &mut ChaCha8Rng) -> f64 {
    let (s, p, t) = loss_case(rng);
    let params = TverskyParams {
        alpha: rng.random_range(0.0..1.0),
        beta: rng.random_range(0.1..1.0),
        smooth: rng.random_range(0.1..2.0),
    };
    let tt = tensor(s, t);
    let (_, g) = tversky_loss(&tensor(s, p.clone()), &tt, &params).unwrap();
    compare(&[p], &[g.values], |v| tversky_loss(&tensor(s, v[0].clone()), &tt, &params).unwrap().0)
}

/// Every layer and loss, in a fixed order.
pub fn gradient_reports() -> Vec<GradReport> {
    vec![
        run("conv2d", 1, check_conv),
        run("conv2d_transpose", 2, check_conv_transpose),
        run("maxpool2d", 3, check_maxpool),
        run("batchnorm2d (train)", 4, |r| check_batchnorm(r, Mode::Train)),
        run("batchnorm2d (eval)", 5, |r| check_batchnorm(r, Mode::Eval)),
        run("relu", 6, check_relu),
        run("sigmoid", 7, check_sigmoid),
        run("concat", 8, check_concat),
        run("bce", 9, check_bce),
        run("dice", 10, check_dice),
        run("tversky", 11, check_tversky),
    ]
}
