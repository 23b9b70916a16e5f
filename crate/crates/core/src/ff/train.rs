use std::time::Instant;

use rand::seq::SliceRandom;

use crate::config::{ClassifierInput, InferenceMode, StepMode, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::inference::{evaluate, features_from_pass, train_classifier_step, ClassifierHead};
use crate::labels::LabelCodec;
use crate::rng::{stream, TAG_NEGATIVES, TAG_SHUFFLE};
use crate::tensor::{adam_step, conv2d_weight_grad, Tensor};

use super::loss::{layer_loss, network_loss, sigmoid};
use super::network::{FfLayer, FfNetwork, ForwardPass, LayerActivity};

/// Running per-layer discrimination tallies.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LayerTally {
    pub loss_sum: f64,
    pub correct: usize,
    pub count: usize,
}

impl LayerTally {
    pub fn mean_loss(&self) -> f64 {
        self.loss_sum / self.count.max(1) as f64
    }

    pub fn accuracy(&self) -> f64 {
        100.0 * self.correct as f64 / self.count.max(1) as f64
    }

    fn merge(&mut self, other: &LayerTally) {
        self.loss_sum += other.loss_sum;
        self.correct += other.correct;
        self.count += other.count;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    /// Network loss before the update, averaged over every sample seen.
    pub network_loss: f64,
    pub samples: usize,
    pub layers: Vec<LayerTally>,
}

/// Gradient of the batch-mean loss of `layer` alone w.r.t. its weights and
/// bias. Only this layer's own input and activations enter.
pub fn layer_grads(
    layer: &FfLayer,
    activity: &LayerActivity,
    is_positive: &[bool],
) -> Result<(Tensor, Tensor)> {
    let batch = is_positive.len();
    if activity.goodness.len() != batch {
        return Err(Error::shape(
            "layer_grads",
            format!("{} flags for a batch of {}", batch, activity.goodness.len()),
        ));
    }
    let act = &activity.activations;
    let mut upstream = Tensor::zeros(act.shape());
    for (b, (&g, &pos)) in activity.goodness.iter().zip(is_positive).enumerate() {
        // loss = softplus(-s(g-θ))  ⇒  ∂loss/∂g = -s·σ(-s(g-θ))
        let s = if pos { 1.0 } else { -1.0 };
        let dg = -s * sigmoid(-s * (g - layer.theta)) / batch as f64;
        // ∂g/∂y = 2y; where the ReLU is closed y = 0 already.
        let coef = (2.0 * dg) as f32;
        for (u, &y) in upstream.sample_mut(b).iter_mut().zip(act.sample(b)) {
            *u = coef * y;
        }
    }
    conv2d_weight_grad(&activity.input, &upstream, &layer.spec)
}

fn tally(pass: &ForwardPass, network: &FfNetwork, is_positive: &[bool]) -> Result<StepStats> {
    let mut per_layer = Vec::with_capacity(network.layers.len());
    let mut layers = Vec::with_capacity(network.layers.len());
    for (layer, act) in network.layers.iter().zip(&pass.layers) {
        let l = layer_loss(&act.goodness, layer.theta, is_positive)?;
        let correct = l.probability.iter().filter(|&&p| p > 0.5).count();
        layers.push(LayerTally {
            loss_sum: l.loss.iter().sum(),
            correct,
            count: is_positive.len(),
        });
        per_layer.push(l.loss);
    }
    Ok(StepStats {
        network_loss: network_loss(&per_layer, network.include_first)?,
        samples: is_positive.len(),
        layers,
    })
}

fn update(network: &mut FfNetwork, x: &Tensor, is_positive: &[bool], lr: f32) -> Result<StepStats> {
    let pass = network.forward(x)?;
    let stats = tally(&pass, network, is_positive)?;
    for (layer, act) in network.layers.iter_mut().zip(&pass.layers) {
        if !layer.trainable {
            continue;
        }
        let (gw, gb) = layer_grads(layer, act, is_positive)?;
        adam_step(&mut layer.weights, &gw, &mut layer.adam_w, lr)?;
        adam_step(&mut layer.bias, &gb, &mut layer.adam_b, lr)?;
    }
    Ok(stats)
}

/// One FF update from a positive and a negative batch of equal size.
///
/// Every trainable layer descends the gradient of its own loss term only.
/// `Combined` takes one step on the concatenated batch; `Sequential` steps on
/// the positives, then on the negatives.
pub fn ff_train_step(
    network: &mut FfNetwork,
    positive: &Tensor,
    negative: &Tensor,
    lr: f32,
    mode: StepMode,
) -> Result<StepStats> {
    let (np, nn) = (positive.shape()[0], negative.shape()[0]);
    match mode {
        StepMode::Combined => {
            let x = Tensor::concat(&[positive, negative])?;
            let flags: Vec<bool> = (0..np + nn).map(|i| i < np).collect();
            update(network, &x, &flags, lr)
        }
        StepMode::Sequential => {
            let a = update(network, positive, &vec![true; np], lr)?;
            let b = update(network, negative, &vec![false; nn], lr)?;
            let samples = a.samples + b.samples;
            let mut layers = a.layers;
            for (t, o) in layers.iter_mut().zip(&b.layers) {
                t.merge(o);
            }
            Ok(StepStats {
                network_loss: (a.network_loss * a.samples as f64
                    + b.network_loss * b.samples as f64)
                    / samples as f64,
                samples,
                layers,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f32,
    pub network_loss: f64,
    pub disc_loss: Vec<f64>,
    pub disc_acc: Vec<f64>,
    /// Classifier accuracy on training batches, predicted before each update.
    pub train_acc: f64,
    /// Classifier accuracy on the validation set after the epoch.
    pub val_acc: Option<f64>,
    /// Not part of any deterministic artifact.
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: FfNetwork,
    pub head: ClassifierHead,
    pub epochs: Vec<EpochMetrics>,
    /// Conv MACs spent by training (FF steps, readout passes, validation).
    pub conv_macs: u64,
}

fn batch_images(ds: &Dataset, idx: &[usize]) -> Result<Tensor> {
    let (h, w) = ds.image_hw();
    ds.images.select(idx).reshape(&[idx.len(), 1, h, w])
}

/// Full FF training with the linear readout trained alongside.
///
/// Each epoch reshuffles with its own seeded stream and each mini-batch
/// draws negatives from a stream keyed by `(epoch, batch)`.
pub fn train<F>(
    cfg: &TrainConfig,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochMetrics),
{
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let hw = train_set.image_hw();
    let mut network = FfNetwork::new(cfg, hw)?;
    let mut head = ClassifierHead::new(network.feature_len());
    let codec = LabelCodec::new(cfg.label_set()?, cfg.label_intensity, hw.0, hw.1)?;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut conv_macs = 0u64;

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let lr = super::loss::lr_schedule(epoch, cfg.epochs, cfg.lr)?;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut stream(cfg.seed, &[TAG_SHUFFLE, epoch as u64]));

        let mut tallies = vec![LayerTally::default(); network.layers.len()];
        let mut loss_sum = 0.0;
        let mut samples = 0usize;
        let mut head_correct = 0usize;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let labels: Vec<usize> = idx.iter().map(|&i| train_set.label(i)).collect();
            let images = batch_images(train_set, idx)?;
            let mut rng = stream(cfg.seed, &[TAG_NEGATIVES, epoch as u64, bi as u64]);
            let pn = codec.build_pos_neg(&images, &labels, &mut rng)?;
            let stats = ff_train_step(&mut network, &pn.positive, &pn.negative, lr, cfg.step_mode)?;
            conv_macs += network.conv_macs(stats.samples);
            loss_sum += stats.network_loss * stats.samples as f64;
            samples += stats.samples;
            for (t, s) in tallies.iter_mut().zip(&stats.layers) {
                t.merge(s);
            }

            let readout_input = match cfg.classifier_input {
                ClassifierInput::Neutral => images,
                ClassifierInput::TrueLabelTrain => pn.positive,
            };
            let pass = network.forward(&readout_input)?;
            conv_macs += pass.conv_macs;
            let step = train_classifier_step(&mut head, &features_from_pass(&pass), &labels, lr)?;
            head_correct += step.correct;
        }

        let val_acc = match val_set {
            Some(v) if !v.is_empty() => {
                let e = evaluate(&network, &head, &codec, v, InferenceMode::Classifier)?;
                conv_macs += e.conv_macs;
                Some(e.accuracy)
            }
            _ => None,
        };
        let m = EpochMetrics {
            epoch,
            lr,
            network_loss: loss_sum / samples as f64,
            disc_loss: tallies.iter().map(LayerTally::mean_loss).collect(),
            disc_acc: tallies.iter().map(LayerTally::accuracy).collect(),
            train_acc: 100.0 * head_correct as f64 / train_set.len() as f64,
            val_acc,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&m);
        epochs.push(m);
    }
    Ok(TrainOutcome {
        network,
        head,
        epochs,
        conv_macs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::ff::layer_goodness;
    use crate::rng::RunRng;
    use rand::{Rng, SeedableRng};

    fn toy_cfg(include_first: bool) -> TrainConfig {
        TrainConfig {
            filters: vec![3, 3, 3],
            kernel: 3,
            include_first_layer_loss: include_first,
            seed: 4,
            ..TrainConfig::default()
        }
    }

    fn images(n: usize, seed: u64) -> Tensor {
        let mut rng = RunRng::seed_from_u64(seed);
        Tensor::from_vec(
            &[n, 1, 8, 8],
            (0..n * 64).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn layer_one_frozen_without_its_loss() {
        let mut net = FfNetwork::new(&toy_cfg(false), (8, 8)).unwrap();
        let w0 = net.layers[0].weights.clone();
        let b0 = net.layers[0].bias.clone();
        let w1 = net.layers[1].weights.clone();
        for mode in [StepMode::Combined, StepMode::Sequential] {
            ff_train_step(&mut net, &images(2, 1), &images(2, 2), 1e-3, mode).unwrap();
        }
        assert_eq!(net.layers[0].weights, w0);
        assert_eq!(net.layers[0].bias, b0);
        assert_ne!(net.layers[1].weights, w1);

        let mut net = FfNetwork::new(&toy_cfg(true), (8, 8)).unwrap();
        ff_train_step(&mut net, &images(2, 1), &images(2, 2), 1e-3, StepMode::Combined).unwrap();
        assert_ne!(net.layers[0].weights, w0);
    }

    #[test]
    fn layer_grad_ignores_deeper_layers() {
        let full = FfNetwork::new(&toy_cfg(false), (8, 8)).unwrap();
        let mut short_cfg = toy_cfg(false);
        short_cfg.filters.truncate(2);
        let short = FfNetwork::new(&short_cfg, (8, 8)).unwrap();
        let x = images(4, 7);
        let flags = [true, false, true, false];
        let a = full.forward(&x).unwrap();
        let b = short.forward(&x).unwrap();
        let ga = layer_grads(&full.layers[1], &a.layers[1], &flags).unwrap();
        let gb = layer_grads(&short.layers[1], &b.layers[1], &flags).unwrap();
        assert_eq!(ga, gb);
    }

    #[test]
    fn step_lowers_network_loss() {
        let mut net = FfNetwork::new(&toy_cfg(false), (8, 8)).unwrap();
        let (p, n) = (images(1, 10), images(1, 11));
        let x = Tensor::concat(&[&p, &n]).unwrap();
        let flags = [true, false];
        let before = tally(&net.forward(&x).unwrap(), &net, &flags).unwrap().network_loss;
        let reported = ff_train_step(&mut net, &p, &n, 1e-3, StepMode::Combined).unwrap();
        assert_eq!(reported.network_loss, before);
        let after = tally(&net.forward(&x).unwrap(), &net, &flags).unwrap().network_loss;
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn layer_grad_matches_finite_differences() {
        let net = FfNetwork::new(&toy_cfg(false), (8, 8)).unwrap();
        let x = images(2, 3);
        let pass = net.forward(&x).unwrap();
        let flags = [true, false];
        let layer = &net.layers[1];
        let act = &pass.layers[1];
        let (gw, _) = layer_grads(layer, act, &flags).unwrap();
        // Loss of layer 2 as a function of its weights, f64 throughout.
        let loss = |w: &[f64]| -> f64 {
            let input = &act.input;
            let (c, k, h) = (3usize, 3usize, 8usize);
            let mut total = 0.0;
            for (b, &pos) in flags.iter().enumerate() {
                let mut g = 0.0;
                for o in 0..3 {
                    for y in 0..h as isize {
                        for xx in 0..h as isize {
                            let mut z = layer.bias.data()[o] as f64;
                            for ci in 0..c {
                                for i in 0..k as isize {
                                    for j in 0..k as isize {
                                        let (iy, ix) = (y + i - 1, xx + j - 1);
                                        if iy < 0 || ix < 0 || iy >= 8 || ix >= 8 {
                                            continue;
                                        }
                                        z += w[((o * c + ci) * k + i as usize) * k + j as usize]
                                            * input.sample(b)
                                                [(ci * h + iy as usize) * h + ix as usize]
                                                as f64;
                                    }
                                }
                            }
                            g += z.max(0.0).powi(2);
                        }
                    }
                }
                let s = if pos { 1.0 } else { -1.0 };
                total += (1.0 + (-s * (g - layer.theta)).exp()).ln();
            }
            total / flags.len() as f64
        };
        let w64: Vec<f64> = layer.weights.data().iter().map(|&v| v as f64).collect();
        for i in 0..w64.len() {
            let (mut p, mut m) = (w64.clone(), w64.clone());
            p[i] += 1e-3;
            m[i] -= 1e-3;
            let fd = (loss(&p) - loss(&m)) / 2e-3;
            let an = gw.data()[i] as f64;
            assert!((fd - an).abs() <= 1e-3 * fd.abs().max(1e-2), "{i}: {fd} vs {an}");
        }
        // goodness reported by the pass equals the oracle's definition
        assert_eq!(act.goodness, layer_goodness(&act.activations));
    }

    fn tiny_dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = RunRng::seed_from_u64(seed);
        let imgs = Tensor::from_vec(
            &[n, 8, 8],
            (0..n * 64).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let labels = (0..n).map(|i| (i % 10) as u8).collect();
        Dataset::new(imgs, labels, Split::Train).unwrap()
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            lr: 1e-3,
            ..toy_cfg(false)
        };
        let ds = tiny_dataset(12, 1);
        let val = tiny_dataset(6, 2);
        let mut seen = 0;
        let a = train(&cfg, &ds, Some(&val), |_| seen += 1).unwrap();
        let b = train(&cfg, &ds, Some(&val), |_| {}).unwrap();
        assert_eq!(seen, 2);
        let strip = |v: &[EpochMetrics]| {
            v.iter()
                .map(|m| EpochMetrics {
                    wall_seconds: 0.0,
                    ..m.clone()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a.epochs), strip(&b.epochs));
        for (x, y) in a.network.layers.iter().zip(&b.network.layers) {
            assert_eq!(x.weights, y.weights);
        }
        assert_eq!(a.head.weights, b.head.weights);
        assert_eq!(a.epochs[1].lr, 1e-3 * 2.0 / 2.0);
        assert_eq!(a.epochs[0].disc_acc.len(), 3);
    }
}
