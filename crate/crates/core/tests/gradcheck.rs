mod common;

use common::*;
use lesion_cascade::layers::Mode;
use lesion_cascade::networks::{build_tiramisu, build_unet, NetworkGraph, TiramisuConfig, UNetConfig};
use lesion_cascade::Shape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn every_layer_and_loss_matches_central_differences() {
    for r in gradient_reports() {
        assert!(r.instances >= 20);
        assert!(r.worst < MAX_RELATIVE_ERROR, "{}: relative error {:e}", r.name, r.worst);
    }
}

#[test]
fn relative_error_is_scale_free() {
    assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
    let a = relative_error(&[1.0, 2.0], &[1.001, 2.0]);
    let b = relative_error(&[1e3, 2e3], &[1.001e3, 2e3]);
    assert!((a - b).abs() < 1e-12);
}

fn objective(net: &mut NetworkGraph<f64>, x: &lesion_cascade::Tensor<f64>, r: &[f64], l2: &[(usize, f64)]) -> f64 {
    let y = net.forward(x, Mode::Train).unwrap();
    let penalty: f64 = l2
        .iter()
        .map(|(k, lambda)| lambda * net.trainable()[*k].1.values.iter().map(|w| w * w).sum::<f64>())
        .sum();
    y.values.iter().zip(r).map(|(a, b)| a * b).sum::<f64>() + penalty
}

/// Sampled parameter coordinates of a whole graph in train mode, dropout and
/// batch statistics included.
fn network_gradient(mut net: NetworkGraph<f64>, input: Shape, seed: u64, l2: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    net.set_dropout_seed(seed);
    let x = tensor(input, uniform(&mut rng, input.len(), -1.0, 1.0));
    let names: Vec<String> = net.trainable().into_iter().map(|(n, _)| n).collect();
    let penalised: Vec<(usize, f64)> = if l2 > 0.0 {
        names.iter().enumerate().filter(|(_, n)| n.ends_with(".weight")).map(|(k, _)| (k, l2)).collect()
    } else {
        Vec::new()
    };
    let y = net.forward(&x, Mode::Train).unwrap();
    let r = uniform(&mut rng, y.values.len(), -1.0, 1.0);
    net.zero_grad();
    net.backward(&tensor(y.shape, r.clone())).unwrap();
    let grads: Vec<Vec<f64>> = net.trainable().iter().map(|(_, t)| t.grad.clone().unwrap_or_default()).collect();

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for _ in 0..40 {
        let k = rng.random_range(0..grads.len());
        let i = rng.random_range(0..grads[k].len());
        analytic.push(grads[k][i]);
        let orig = net.trainable()[k].1.values[i];
        net.trainable_mut()[k].values[i] = orig + STEP;
        let up = objective(&mut net, &x, &r, &penalised);
        net.trainable_mut()[k].values[i] = orig - STEP;
        let down = objective(&mut net, &x, &r, &penalised);
        net.trainable_mut()[k].values[i] = orig;
        numeric.push((up - down) / (2.0 * STEP));
    }
    relative_error(&analytic, &numeric)
}

#[test]
fn unet_graph_backpropagates() {
    let cfg = UNetConfig { start_filters: 2, depth: 2, dropout: 0.2, ..Default::default() };
    for seed in 0..3 {
        let net = build_unet::<f64>(&cfg, seed).unwrap();
        let err = network_gradient(net, Shape::new(2, 1, 8, 8), seed, 0.0);
        assert!(err < MAX_RELATIVE_ERROR, "seed {seed}: {err:e}");
    }
}

#[test]
fn tiramisu_graph_backpropagates_with_weight_decay() {
    let cfg = TiramisuConfig {
        down_block_layers: vec![1, 2],
        bottleneck_layers: 2,
        growth_rate: 2,
        start_filters: 3,
        l2_lambda: 0.05,
        ..Default::default()
    };
    for seed in 0..3 {
        let net = build_tiramisu::<f64>(&cfg, seed).unwrap();
        let err = network_gradient(net, Shape::new(2, 1, 8, 8), seed, cfg.l2_lambda);
        assert!(err < MAX_RELATIVE_ERROR, "seed {seed}: {err:e}");
    }
}
