//! Shared helpers for the integration tests: f64 reference implementations
//! and MNIST discovery.

#![allow(dead_code)]

use std::path::PathBuf;

use ffconv::config::TrainConfig;
use ffconv::data::{Dataset, Split};
use ffconv::ff::{layer_grads, FfNetwork};
use ffconv::tensor::{
    conv2d_forward, conv2d_input_grad, conv2d_weight_grad, ConvSpec, Padding, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

/// `$FFCONV_MNIST_DIR`, else `<workspace>/data/mnist`, if all four files
/// (plain or gzipped) are there.
pub fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("FFCONV_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace_root().join("data/mnist"));
    let present = MNIST_FILES
        .iter()
        .all(|f| dir.join(f).is_file() || dir.join(format!("{f}.gz")).is_file());
    present.then_some(dir)
}

pub fn require_mnist() -> PathBuf {
    mnist_dir().unwrap_or_else(|| {
        panic!(
            "MNIST not found: run scripts/fetch_mnist.sh or set FFCONV_MNIST_DIR \
             to a directory with {}",
            MNIST_FILES.join(", ")
        )
    })
}

pub fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn tensor(shape: &[usize], data: Vec<f32>) -> Tensor {
    Tensor::from_vec(shape, data).unwrap()
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Direct-loop correlation of one sample `[C,H,W]` with `[O,C,k,k]`,
/// stride 1, zero padding `pad`. Returns `([O,H',W'], H', W')`.
#[allow(clippy::too_many_arguments)]
pub fn conv_ref(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    weights: &[f64],
    bias: &[f64],
    out_ch: usize,
    k: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = h + 2 * pad + 1 - k;
    let ow = w + 2 * pad + 1 - k;
    let mut y = vec![0.0; out_ch * oh * ow];
    for o in 0..out_ch {
        for r in 0..oh {
            for s in 0..ow {
                let mut acc = bias[o];
                for i in 0..c {
                    for u in 0..k {
                        for v in 0..k {
                            let (yy, xx) = (r + u, s + v);
                            if yy < pad || xx < pad || yy - pad >= h || xx - pad >= w {
                                continue;
                            }
                            acc += weights[((o * c + i) * k + u) * k + v]
                                * x[(i * h + yy - pad) * w + xx - pad];
                        }
                    }
                }
                y[(o * oh + r) * ow + s] = acc;
            }
        }
    }
    (y, oh, ow)
}

pub fn softplus_ref(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Mean over the batch of `softplus(-s(g - θ))` with `g = Σ relu(conv)²`.
#[allow(clippy::too_many_arguments)]
pub fn ff_layer_loss_ref(
    inputs: &[Vec<f64>],
    dims: (usize, usize, usize),
    weights: &[f64],
    bias: &[f64],
    out_ch: usize,
    k: usize,
    pad: usize,
    theta: f64,
    positive: &[bool],
) -> f64 {
    inputs
        .iter()
        .zip(positive)
        .map(|(x, &pos)| {
            let (y, _, _) = conv_ref(x, dims, weights, bias, out_ch, k, pad);
            let g: f64 = y.iter().map(|v| v.max(0.0).powi(2)).sum();
            let s = if pos { 1.0 } else { -1.0 };
            softplus_ref(-s * (g - theta))
        })
        .sum::<f64>()
        / inputs.len() as f64
}

/// `|a - b| / max(|b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / b.abs().max(floor)
}

/// Noise images with a class-dependent bright bar, so tiny nets can learn.
pub fn synthetic_digits(n: usize, hw: usize, seed: u64, split: Split) -> Dataset {
    let mut r = rng(seed);
    let mut data = Vec::with_capacity(n * hw * hw);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 10) as u8;
        for y in 0..hw {
            for x in 0..hw {
                let bar = if label < 5 { x } else { y };
                let on = bar * 5 / hw == (label as usize % 5);
                data.push(if on { 0.9 } else { 0.0 } + r.random_range(0.0..0.1));
            }
        }
        labels.push(label);
    }
    Dataset::new(tensor(&[n, hw, hw], data), labels, split).unwrap()
}

/// Worst `|a - fd| / max(|fd|, 1e-2·‖fd‖∞)` over one gradient tensor.
pub fn max_rel(analytic: &[f32], fd: &[f64]) -> f64 {
    let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-2 * scale).max(1e-12);
    analytic
        .iter()
        .zip(fd)
        .map(|(&a, &f)| (a as f64 - f).abs() / f.abs().max(floor))
        .fold(0.0, f64::max)
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn central<F: Fn(&[f64]) -> f64>(x: &[f64], h: f64, f: F) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn pad_of(padding: Padding, k: usize) -> usize {
    match padding {
        Padding::Same => k / 2,
        Padding::Valid => 0,
    }
}

/// A toy convolution: one sample `[c, hw, hw]`, `f` filters of size `k`.
#[derive(Debug, Clone)]
pub struct ConvCase {
    pub c: usize,
    pub hw: usize,
    pub f: usize,
    pub k: usize,
    pub padding: Padding,
    pub seed: u64,
}

impl ConvCase {
    pub fn random(r: &mut ChaCha8Rng) -> Self {
        loop {
            let case = ConvCase {
                c: r.random_range(1..=4),
                hw: r.random_range(4..=8),
                f: r.random_range(1..=4),
                k: [1, 3, 5][r.random_range(0..3)],
                padding: if r.random() { Padding::Same } else { Padding::Valid },
                seed: r.random(),
            };
            if case.padding == Padding::Same || case.k <= case.hw {
                return case;
            }
        }
    }
}

/// Worst relative error of the conv weight, bias and input gradients of
/// `Σ r ⊙ conv(x)` against differences of [`conv_ref`].
pub fn conv_grad_errors(case: &ConvCase) -> [f64; 3] {
    let ConvCase { c, hw, f, k, padding, seed } = *case;
    let mut r = rng(seed);
    let spec = ConvSpec::new(c, f, k, padding).unwrap();
    let x = uniform(&mut r, c * hw * hw, -1.0, 1.0);
    let w = uniform(&mut r, f * c * k * k, -0.5, 0.5);
    let b = uniform(&mut r, f, -0.2, 0.2);
    let pad = pad_of(padding, k);
    let (oh, ow) = spec.output_hw(hw, hw).unwrap();
    let up = uniform(&mut r, f * oh * ow, -1.0, 1.0);

    let xt = tensor(&[1, c, hw, hw], x.clone());
    let wt = tensor(&[f, c, k, k], w.clone());
    let ut = tensor(&[1, f, oh, ow], up.clone());
    let y = conv2d_forward(&xt, &wt, &tensor(&[f], b.clone()), &spec).unwrap();
    let (x64, w64, b64, u64_) = (to_f64(&x), to_f64(&w), to_f64(&b), to_f64(&up));
    let (y64, _, _) = conv_ref(&x64, (c, hw, hw), &w64, &b64, f, k, pad);
    for (a, e) in y.data().iter().zip(&y64) {
        assert!((*a as f64 - e).abs() <= 1e-5 * (1.0 + e.abs()), "forward {a} vs {e}");
    }
    let (gw, gb) = conv2d_weight_grad(&xt, &ut, &spec).unwrap();
    let gx = conv2d_input_grad(&wt, &ut, &spec, (hw, hw)).unwrap();

    let dot = |y: Vec<f64>| y.iter().zip(&u64_).map(|(a, b)| a * b).sum::<f64>();
    let h = 1e-4;
    let fd_w = central(&w64, h, |p| dot(conv_ref(&x64, (c, hw, hw), p, &b64, f, k, pad).0));
    let fd_b = central(&b64, h, |p| dot(conv_ref(&x64, (c, hw, hw), &w64, p, f, k, pad).0));
    let fd_x = central(&x64, h, |p| dot(conv_ref(p, (c, hw, hw), &w64, &b64, f, k, pad).0));
    [
        max_rel(gw.data(), &fd_w),
        max_rel(gb.data(), &fd_b),
        max_rel(gx.data(), &fd_x),
    ]
}

/// Worst relative error of layer 2's FF gradient (weights, bias) in a
/// `[c, f]` network against differences of [`ff_layer_loss_ref`]. `None` when
/// the case does not fit two layers or the layer is silent.
pub fn ff_grad_errors(case: &ConvCase, positive: bool, theta_frac: f64) -> Option<[f64; 2]> {
    let ConvCase { c, hw, f, k, padding, seed } = *case;
    let cfg = TrainConfig {
        filters: vec![c, f],
        kernel: k,
        padding,
        seed,
        ..TrainConfig::default()
    };
    let mut net = FfNetwork::new(&cfg, (hw, hw)).ok()?;
    let mut r = rng(seed ^ 0x5eed);
    // Non-zero biases keep pre-activations off the ReLU kink.
    for v in net.layers[1].bias.data_mut() {
        *v = r.random_range(0.05..0.2) * if r.random::<bool>() { 1.0 } else { -1.0 };
    }
    let image = tensor(&[1, 1, hw, hw], uniform(&mut r, hw * hw, 0.0, 1.0));
    let pass = net.forward(&image).unwrap();
    let act = &pass.layers[1];
    let g = act.goodness[0];
    if g <= 1e-3 {
        return None;
    }
    net.layers[1].theta = g * theta_frac;
    let layer = &net.layers[1];
    let (gw, gb) = layer_grads(layer, act, &[positive]).unwrap();

    let dims = (c, act.input.shape()[2], act.input.shape()[3]);
    let input = vec![to_f64(act.input.data())];
    let pad = pad_of(padding, k);
    let (w64, b64) = (to_f64(layer.weights.data()), to_f64(layer.bias.data()));
    let theta = layer.theta;
    let h = 1e-6;
    let fd_w = central(&w64, h, |p| {
        ff_layer_loss_ref(&input, dims, p, &b64, f, k, pad, theta, &[positive])
    });
    let fd_b = central(&b64, h, |p| {
        ff_layer_loss_ref(&input, dims, &w64, p, f, k, pad, theta, &[positive])
    });
    Some([max_rel(gw.data(), &fd_w), max_rel(gb.data(), &fd_b)])
}
