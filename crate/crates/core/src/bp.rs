//! Backpropagation baseline with the same convolutional stack.
//!
//! conv → ReLU (→ 2×2 max pool between layers when pooling is on) for every
//! layer, then a dense 10-way readout on the flattened output of the last
//! layer. No label waves and no normalization: labels only enter through the
//! softmax cross-entropy.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::{InferenceMode, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::ff::{lr_schedule, EpochMetrics, FfNetwork};
use crate::inference::{argmax, cross_entropy_grad, ClassifierHead, ConfusionMatrix, Evaluation};
use crate::labels::NUM_CLASSES;
use crate::rng::{stream, TAG_INIT, TAG_SHUFFLE};
use crate::tensor::linalg::gemm;
use crate::tensor::{
    adam_step, conv2d_forward, conv2d_input_grad, conv2d_weight_grad, init_conv_weights, maxpool2,
    maxpool2_backward, relu, relu_backward, AdamState, ConvSpec, PoolMask, Tensor,
};

/// Stream index of the readout initialization, after the conv layers.
const READOUT_STREAM: u64 = 1 << 16;
const EVAL_CHUNK: usize = 100;

#[derive(Debug, Clone)]
pub struct BpLayer {
    pub spec: ConvSpec,
    pub weights: Tensor,
    pub bias: Tensor,
    pub pool_after: bool,
    pub in_hw: (usize, usize),
    adam_w: AdamState,
    adam_b: AdamState,
}

#[derive(Debug, Clone)]
pub struct BpNetwork {
    pub layers: Vec<BpLayer>,
    pub readout: ClassifierHead,
    pub input_hw: (usize, usize),
}

/// Per-layer intermediates kept for the backward pass.
struct Trace {
    inputs: Vec<Tensor>,
    pre: Vec<Tensor>,
    masks: Vec<Option<PoolMask>>,
    features: Tensor,
    logits: Tensor,
}

impl BpNetwork {
    /// Conv layers initialized exactly like the FF network with the same
    /// config; the readout is uniform in `±1/sqrt(fan_in)`.
    pub fn new(cfg: &TrainConfig, input_hw: (usize, usize)) -> Result<Self> {
        let mut layers = Vec::with_capacity(cfg.layers());
        let mut hw = input_hw;
        let specs = FfNetwork::layer_specs(cfg)?;
        let depth = specs.len();
        for (l, spec) in specs.into_iter().enumerate() {
            let (weights, bias) =
                init_conv_weights(&spec, &mut stream(cfg.seed, &[TAG_INIT, l as u64]));
            let pool_after = cfg.pooling && l + 1 < depth;
            let in_hw = hw;
            let out = spec.output_hw(hw.0, hw.1)?;
            hw = if pool_after { (out.0 / 2, out.1 / 2) } else { out };
            if hw.0 == 0 || hw.1 == 0 {
                return Err(Error::Config(format!(
                    "layer {} leaves no spatial extent",
                    l + 1
                )));
            }
            layers.push(BpLayer {
                adam_w: AdamState::new(weights.shape()),
                adam_b: AdamState::new(bias.shape()),
                spec,
                weights,
                bias,
                pool_after,
                in_hw,
            });
        }
        let fan_in = layers.last().map_or(0, |l| l.spec.out_channels) * hw.0 * hw.1;
        let bound = 1.0 / (fan_in as f32).sqrt();
        let mut rng = stream(cfg.seed, &[TAG_INIT, READOUT_STREAM]);
        let w = (0..NUM_CLASSES * fan_in)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        let readout = ClassifierHead::from_parts(
            Tensor::from_vec(&[NUM_CLASSES, fan_in], w)?,
            Tensor::zeros(&[NUM_CLASSES]),
        )?;
        Ok(BpNetwork {
            layers,
            readout,
            input_hw,
        })
    }

    /// Rebuild from stored parameters: conv pairs, then readout weights and bias.
    pub fn from_parts(cfg: &TrainConfig, input_hw: (usize, usize), mut tensors: Vec<Tensor>) -> Result<Self> {
        let mut net = Self::new(cfg, input_hw)?;
        if tensors.len() != 2 * net.layers.len() + 2 {
            return Err(Error::Checkpoint(format!(
                "{} tensors for a {}-layer BP network",
                tensors.len(),
                net.layers.len()
            )));
        }
        let rb = tensors.pop().expect("length checked");
        let rw = tensors.pop().expect("length checked");
        if rw.shape() != net.readout.weights.shape() {
            return Err(Error::Checkpoint(format!(
                "readout {:?}, expected {:?}",
                rw.shape(),
                net.readout.weights.shape()
            )));
        }
        net.readout = ClassifierHead::from_parts(rw, rb)?;
        let mut it = tensors.into_iter();
        for layer in &mut net.layers {
            let (w, b) = (it.next().expect("counted"), it.next().expect("counted"));
            if w.shape() != layer.weights.shape() || b.shape() != layer.bias.shape() {
                return Err(Error::Checkpoint(format!(
                    "conv {:?}/{:?}, expected {:?}/{:?}",
                    w.shape(),
                    b.shape(),
                    layer.weights.shape(),
                    layer.bias.shape()
                )));
            }
            layer.weights = w;
            layer.bias = b;
        }
        Ok(net)
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        let mut t: Vec<Tensor> = self
            .layers
            .iter()
            .flat_map(|l| [l.weights.clone(), l.bias.clone()])
            .collect();
        t.push(self.readout.weights.clone());
        t.push(self.readout.bias.clone());
        t
    }

    pub fn conv_param_count(&self) -> usize {
        self.layers.iter().map(|l| l.spec.param_count()).sum()
    }

    pub fn conv_macs(&self, batch: usize) -> u64 {
        self.layers
            .iter()
            .map(|l| l.spec.macs(batch, l.in_hw.0, l.in_hw.1))
            .sum()
    }

    fn trace(&self, images: &Tensor) -> Result<Trace> {
        if images.rank() != 4 || images.shape()[1] != 1 {
            return Err(Error::shape(
                "bp_forward",
                format!("images {:?}, expected [B, 1, H, W]", images.shape()),
            ));
        }
        let batch = images.shape()[0];
        let mut x = images.clone();
        let mut t = Trace {
            inputs: Vec::new(),
            pre: Vec::new(),
            masks: Vec::new(),
            features: Tensor::zeros(&[0]),
            logits: Tensor::zeros(&[0]),
        };
        for layer in &self.layers {
            let z = conv2d_forward(&x, &layer.weights, &layer.bias, &layer.spec)?;
            let y = relu(&z);
            let (next, mask) = if layer.pool_after {
                let (p, m) = maxpool2(&y)?;
                (p, Some(m))
            } else {
                (y, None)
            };
            t.inputs.push(std::mem::replace(&mut x, next));
            t.pre.push(z);
            t.masks.push(mask);
        }
        let len = x.sample_len();
        t.features = x.reshape(&[batch, len])?;
        t.logits = self.readout.logits(&t.features)?;
        Ok(t)
    }

    /// Logits `[B,10]` for unlabeled images `[B,1,H,W]`.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.trace(images)?.logits)
    }

    /// Mean cross-entropy and the gradients of every parameter, ordered as
    /// [`Self::tensors`].
    pub fn gradients(&self, images: &Tensor, labels: &[usize]) -> Result<(f64, usize, Vec<Tensor>)> {
        let t = self.trace(images)?;
        let (dlogits, stats) = cross_entropy_grad(&t.logits, labels)?;
        let batch = labels.len();
        let h = self.readout.feature_len();
        let mut gw = Tensor::zeros(&[NUM_CLASSES, h]);
        gemm(
            NUM_CLASSES,
            batch,
            h,
            &dlogits,
            (1, NUM_CLASSES as isize),
            t.features.data(),
            (h as isize, 1),
            gw.data_mut(),
            false,
        );
        let mut gb = Tensor::zeros(&[NUM_CLASSES]);
        for row in dlogits.chunks(NUM_CLASSES) {
            for (g, d) in gb.data_mut().iter_mut().zip(row) {
                *g += d;
            }
        }
        let mut upstream = Tensor::zeros(&[batch, h]);
        gemm(
            batch,
            NUM_CLASSES,
            h,
            &dlogits,
            (NUM_CLASSES as isize, 1),
            self.readout.weights.data(),
            (h as isize, 1),
            upstream.data_mut(),
            false,
        );

        let mut grads = vec![Tensor::zeros(&[0]); 2 * self.layers.len()];
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let z = &t.pre[l];
            let dy = match &t.masks[l] {
                Some(mask) => {
                    let s = mask.input_shape();
                    let pooled = [s[0], s[1], s[2] / 2, s[3] / 2];
                    maxpool2_backward(mask, &upstream.reshape(&pooled)?)?
                }
                None => upstream.reshape(z.shape())?,
            };
            let dz = relu_backward(z, &dy)?;
            let (w, b) = conv2d_weight_grad(&t.inputs[l], &dz, &layer.spec)?;
            grads[2 * l] = w;
            grads[2 * l + 1] = b;
            upstream = if l > 0 {
                conv2d_input_grad(&layer.weights, &dz, &layer.spec, layer.in_hw)?
            } else {
                Tensor::zeros(&[0])
            };
        }
        grads.push(gw);
        grads.push(gb);
        Ok((stats.loss, stats.correct, grads))
    }

    /// One Adam step on the mean cross-entropy of the batch. Returns the
    /// pre-update loss and hit count.
    pub fn train_step(&mut self, images: &Tensor, labels: &[usize], lr: f32) -> Result<(f64, usize)> {
        let (loss, correct, grads) = self.gradients(images, labels)?;
        let mut g = grads.into_iter();
        for layer in &mut self.layers {
            adam_step(&mut layer.weights, &g.next().expect("conv grad"), &mut layer.adam_w, lr)?;
            adam_step(&mut layer.bias, &g.next().expect("conv grad"), &mut layer.adam_b, lr)?;
        }
        let (gw, gb) = (g.next().expect("readout grad"), g.next().expect("readout grad"));
        let r = &mut self.readout;
        adam_step(&mut r.weights, &gw, &mut r.adam_w, lr)?;
        adam_step(&mut r.bias, &gb, &mut r.adam_b, lr)?;
        Ok((loss, correct))
    }
}

fn batch_of(ds: &Dataset, idx: &[usize]) -> Result<Tensor> {
    let (h, w) = ds.image_hw();
    ds.images.select(idx).reshape(&[idx.len(), 1, h, w])
}

pub fn evaluate_bp(network: &BpNetwork, dataset: &Dataset) -> Result<Evaluation> {
    let mut confusion = ConfusionMatrix::default();
    let mut predictions = Vec::with_capacity(dataset.len());
    let mut conv_macs = 0;
    let all: Vec<usize> = (0..dataset.len()).collect();
    for idx in all.chunks(EVAL_CHUNK) {
        let logits = network.forward(&batch_of(dataset, idx)?)?;
        conv_macs += network.conv_macs(idx.len());
        for (k, &i) in idx.iter().enumerate() {
            let p = argmax(logits.sample(k));
            confusion.record(dataset.label(i), p);
            predictions.push(p);
        }
    }
    Ok(Evaluation {
        mode: InferenceMode::Classifier,
        accuracy: confusion.accuracy(),
        confusion,
        predictions,
        conv_macs,
    })
}

#[derive(Debug, Clone)]
pub struct BpOutcome {
    pub network: BpNetwork,
    pub epochs: Vec<EpochMetrics>,
}

/// BP training with the FF shuffling and learning-rate schedule. `network_loss`
/// holds the mean cross-entropy; per-layer discrimination columns stay empty.
pub fn bp_train<F>(
    cfg: &TrainConfig,
    lr: f32,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    mut on_epoch: F,
) -> Result<BpOutcome>
where
    F: FnMut(&EpochMetrics),
{
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut network = BpNetwork::new(cfg, train_set.image_hw())?;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let lr_e = lr_schedule(epoch, cfg.epochs, lr)?;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut stream(cfg.seed, &[TAG_SHUFFLE, epoch as u64]));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let labels: Vec<usize> = idx.iter().map(|&i| train_set.label(i)).collect();
            let (loss, hits) = network.train_step(&batch_of(train_set, idx)?, &labels, lr_e)?;
            loss_sum += loss * idx.len() as f64;
            correct += hits;
        }
        let val_acc = match val_set {
            Some(v) if !v.is_empty() => Some(evaluate_bp(&network, v)?.accuracy),
            _ => None,
        };
        let m = EpochMetrics {
            epoch,
            lr: lr_e,
            network_loss: loss_sum / train_set.len() as f64,
            disc_loss: Vec::new(),
            disc_acc: Vec::new(),
            train_acc: 100.0 * correct as f64 / train_set.len() as f64,
            val_acc,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&m);
        epochs.push(m);
    }
    Ok(BpOutcome { network, epochs })
}
