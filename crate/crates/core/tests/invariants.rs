//! Normalization and locality properties of the FF stack.

mod common;

use common::{rng, synthetic_digits, tensor, uniform};
use ffconv::config::{StepMode, TrainConfig};
use ffconv::data::Split;
use ffconv::ff::{ff_train_step, layer_grads, train, FfNetwork};
use ffconv::tensor::{rms_normalize, Padding};
use proptest::prelude::*;
use rand::Rng;

fn mean_square(x: &[f32]) -> f64 {
    x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / x.len() as f64
}

fn close(a: &[f32], b: &[f32], tol: f32) -> bool {
    let scale = a.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1e-6);
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * scale)
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 128,
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn normalized_samples_have_unit_mean_square(
        seed in any::<u64>(),
        c in 1usize..8,
        h in 1usize..12,
        w in 1usize..12,
        log_scale in -1.0f32..2.0,
    ) {
        let mut r = rng(seed);
        let n = c * h * w;
        let scale = 10f32.powf(log_scale);
        // Post-ReLU-like: a third of the entries are exactly zero.
        let mut data: Vec<f32> = uniform(&mut r, 2 * n, 0.0, scale);
        for v in data.iter_mut() {
            if r.random_range(0..3) == 0 {
                *v = 0.0;
            }
        }
        data[0] = scale;
        data[n] = scale;
        let (normed, _) = rms_normalize(&tensor(&[2, c, h, w], data));
        for b in 0..2 {
            prop_assert!((mean_square(normed.sample(b)) - 1.0).abs() <= 1e-4);
        }
    }

    #[test]
    fn normalization_ignores_positive_rescaling(
        seed in any::<u64>(),
        c in prop_oneof![Just(0.1f32), Just(10.0), 0.2f32..5.0],
    ) {
        let mut r = rng(seed);
        let a = tensor(&[3, 2, 5, 5], uniform(&mut r, 150, 0.0, 2.0));
        let (x, _) = rms_normalize(&a);
        let (y, _) = rms_normalize(&a.scale(c));
        prop_assert!(close(x.data(), y.data(), 1e-5));
    }

    /// With zero biases every forwarded tensor is invariant to the input's
    /// scale, because each layer is positively homogeneous.
    #[test]
    fn forwarded_tensors_ignore_input_scale(
        seed in any::<u64>(),
        c in prop_oneof![Just(0.1f32), Just(10.0)],
        pooling in any::<bool>(),
    ) {
        let cfg = TrainConfig {
            filters: vec![4, 4, 3],
            kernel: 3,
            pooling,
            seed,
            ..TrainConfig::default()
        };
        let net = FfNetwork::new(&cfg, (12, 12)).unwrap();
        let mut r = rng(seed);
        let x = tensor(&[2, 1, 12, 12], uniform(&mut r, 288, 0.0, 1.0));
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x.scale(c)).unwrap();
        for l in 1..3 {
            prop_assert!(close(a.layers[l].input.data(), b.layers[l].input.data(), 1e-4), "layer {}", l + 1);
        }
        let last = net.layers.last().unwrap();
        let ha = last.hand_on(&a.layers[2].activations).unwrap();
        let hb = last.hand_on(&b.layers[2].activations).unwrap();
        prop_assert!(close(ha.data(), hb.data(), 1e-4));
    }

    /// The gradient of layer `l` is bitwise unchanged by removing layers
    /// above it or by including layer 1's loss.
    #[test]
    fn layer_grads_depend_only_on_their_own_term(
        seed in any::<u64>(),
        l in 1usize..3,
        pooling in any::<bool>(),
        padding in prop_oneof![Just(Padding::Same), Just(Padding::Valid)],
    ) {
        let base = TrainConfig {
            filters: vec![3, 3, 3, 2],
            kernel: 3,
            padding,
            pooling,
            seed,
            ..TrainConfig::default()
        };
        let short = TrainConfig { filters: base.filters[..=l].to_vec(), ..base.clone() };
        let first = TrainConfig { include_first_layer_loss: true, ..base.clone() };
        let nets: Vec<FfNetwork> = match [&base, &short, &first]
            .iter()
            .map(|c| FfNetwork::new(c, (28, 28)))
            .collect()
        {
            Ok(n) => n,
            Err(_) => return Err(TestCaseError::reject("input too small for four valid pooled layers")),
        };
        let mut r = rng(seed);
        let x = tensor(&[4, 1, 28, 28], uniform(&mut r, 4 * 784, 0.0, 1.0));
        let flags = [true, false, true, false];
        let grads: Vec<_> = nets
            .iter()
            .map(|n| {
                let pass = n.forward(&x).unwrap();
                layer_grads(&n.layers[l], &pass.layers[l], &flags).unwrap()
            })
            .collect();
        for g in &grads[1..] {
            prop_assert_eq!(&g.0, &grads[0].0);
            prop_assert_eq!(&g.1, &grads[0].1);
        }
    }
}

#[test]
fn first_layer_stays_frozen_by_default() {
    let cfg = TrainConfig {
        filters: vec![3, 3, 2],
        kernel: 3,
        epochs: 2,
        batch_size: 10,
        lr: 1e-2,
        ..TrainConfig::default()
    };
    let init = FfNetwork::new(&cfg, (10, 10)).unwrap();
    let ds = synthetic_digits(40, 10, 3, Split::Train);
    let out = train(&cfg, &ds, None, |_| {}).unwrap();
    assert!(!out.network.layers[0].trainable);
    assert_eq!(out.network.layers[0].weights, init.layers[0].weights);
    assert_eq!(out.network.layers[0].bias, init.layers[0].bias);
    assert_ne!(out.network.layers[1].weights, init.layers[1].weights);
}

#[test]
fn first_layer_trains_when_its_loss_is_included() {
    for mode in [StepMode::Combined, StepMode::Sequential] {
        let cfg = TrainConfig {
            filters: vec![3, 2],
            kernel: 3,
            include_first_layer_loss: true,
            step_mode: mode,
            ..TrainConfig::default()
        };
        let mut net = FfNetwork::new(&cfg, (8, 8)).unwrap();
        let before = net.layers[0].weights.clone();
        let mut r = rng(5);
        let pos = tensor(&[3, 1, 8, 8], uniform(&mut r, 192, 0.0, 1.0));
        let neg = tensor(&[3, 1, 8, 8], uniform(&mut r, 192, 0.0, 1.0));
        ff_train_step(&mut net, &pos, &neg, 1e-2, mode).unwrap();
        assert_ne!(net.layers[0].weights, before);
    }
}
