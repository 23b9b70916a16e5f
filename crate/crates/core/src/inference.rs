//! Reading labels out of a trained network.
//!
//! Two paths exist. The linear classifier maps the RMS-normalized
//! activations of every layer after the first to ten logits, from a single
//! pass over the unlabeled image. Goodness inference runs the image once per
//! candidate label and picks the label whose copy produces the largest
//! `Σ y²` outside layer 1, costing ten passes.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::InferenceMode;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::ff::{FfNetwork, ForwardPass};
use crate::labels::{LabelCodec, NUM_CLASSES};
use crate::png_io;
use crate::tensor::linalg::gemm;
use crate::tensor::{adam_step, rms_normalize, AdamState, Tensor};

const CLASSIFIER_CHUNK: usize = 100;
const GOODNESS_CHUNK: usize = 10;

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Ten-way linear readout, zero-initialized.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub weights: Tensor,
    pub bias: Tensor,
    pub(crate) adam_w: AdamState,
    pub(crate) adam_b: AdamState,
}

impl ClassifierHead {
    pub fn new(feature_len: usize) -> Self {
        Self::from_parts(
            Tensor::zeros(&[NUM_CLASSES, feature_len]),
            Tensor::zeros(&[NUM_CLASSES]),
        )
        .expect("shapes built consistently")
    }

    pub fn from_parts(weights: Tensor, bias: Tensor) -> Result<Self> {
        if weights.rank() != 2 || weights.shape()[0] != NUM_CLASSES || bias.shape() != [NUM_CLASSES]
        {
            return Err(Error::shape(
                "ClassifierHead",
                format!(
                    "weights {:?} / bias {:?}, expected [{NUM_CLASSES}, H] / [{NUM_CLASSES}]",
                    weights.shape(),
                    bias.shape()
                ),
            ));
        }
        Ok(ClassifierHead {
            adam_w: AdamState::new(weights.shape()),
            adam_b: AdamState::new(bias.shape()),
            weights,
            bias,
        })
    }

    pub fn feature_len(&self) -> usize {
        self.weights.shape()[1]
    }

    /// `[B, H] → [B, 10]`.
    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        let h = self.feature_len();
        if features.rank() != 2 || features.shape()[1] != h {
            return Err(Error::shape(
                "ClassifierHead::logits",
                format!("features {:?}, expected [B, {h}]", features.shape()),
            ));
        }
        let batch = features.shape()[0];
        let mut out = Tensor::zeros(&[batch, NUM_CLASSES]);
        for b in 0..batch {
            out.sample_mut(b).copy_from_slice(self.bias.data());
        }
        gemm(
            batch,
            h,
            NUM_CLASSES,
            features.data(),
            (h as isize, 1),
            self.weights.data(),
            (1, h as isize),
            out.data_mut(),
            true,
        );
        Ok(out)
    }
}

/// Readout features taken from an existing forward pass.
pub fn features_from_pass(pass: &ForwardPass) -> Tensor {
    let batch = pass.layers[0].goodness.len();
    let normed: Vec<Tensor> = pass.layers[1..]
        .iter()
        .map(|l| rms_normalize(&l.activations).0)
        .collect();
    let len: usize = normed.iter().map(Tensor::sample_len).sum();
    let mut out = Tensor::zeros(&[batch, len]);
    for b in 0..batch {
        let dst = out.sample_mut(b);
        let mut at = 0;
        for t in &normed {
            let s = t.sample(b);
            dst[at..at + s.len()].copy_from_slice(s);
            at += s.len();
        }
    }
    out
}

/// Normalized activations of layers 2..L for a batch `[B,1,H,W]`, flattened
/// in layer order.
pub fn classifier_features(network: &FfNetwork, images: &Tensor) -> Result<Tensor> {
    Ok(features_from_pass(&network.forward(images)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierStep {
    /// Mean softmax cross-entropy before the update.
    pub loss: f64,
    /// Samples whose pre-update argmax matched the label.
    pub correct: usize,
}

fn softmax(logits: &[f32]) -> [f64; NUM_CLASSES] {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let mut p = [0.0; NUM_CLASSES];
    let mut sum = 0.0;
    for (pi, &z) in p.iter_mut().zip(logits) {
        *pi = (z as f64 - max).exp();
        sum += *pi;
    }
    p.iter_mut().for_each(|v| *v /= sum);
    p
}

/// Gradient of the mean softmax cross-entropy w.r.t. `logits [B,10]`,
/// row-major, together with the pre-update loss and hit count.
pub fn cross_entropy_grad(logits: &Tensor, labels: &[usize]) -> Result<(Vec<f32>, ClassifierStep)> {
    let batch = labels.len();
    if batch != logits.shape()[0] || batch == 0 {
        return Err(Error::shape(
            "cross-entropy",
            format!("{batch} labels for {} logit rows", logits.shape()[0]),
        ));
    }
    let mut dlogits = vec![0.0f32; batch * NUM_CLASSES];
    let mut loss = 0.0;
    let mut correct = 0;
    for (b, &label) in labels.iter().enumerate() {
        if label >= NUM_CLASSES {
            return Err(Error::LabelOutOfRange {
                label,
                classes: NUM_CLASSES,
            });
        }
        let z = logits.sample(b);
        if argmax(z) == label {
            correct += 1;
        }
        let p = softmax(z);
        loss -= p[label].max(f64::MIN_POSITIVE).ln();
        for c in 0..NUM_CLASSES {
            let target = if c == label { 1.0 } else { 0.0 };
            dlogits[b * NUM_CLASSES + c] = ((p[c] - target) / batch as f64) as f32;
        }
    }
    let stats = ClassifierStep {
        loss: loss / batch as f64,
        correct,
    };
    Ok((dlogits, stats))
}

/// Gradients of the mean cross-entropy over `features` w.r.t. the head.
pub fn classifier_grads(
    head: &ClassifierHead,
    features: &Tensor,
    labels: &[usize],
) -> Result<(Tensor, Tensor, ClassifierStep)> {
    let (dlogits, stats) = cross_entropy_grad(&head.logits(features)?, labels)?;
    let batch = labels.len();
    let h = head.feature_len();
    let mut gw = Tensor::zeros(&[NUM_CLASSES, h]);
    gemm(
        NUM_CLASSES,
        batch,
        h,
        &dlogits,
        (1, NUM_CLASSES as isize),
        features.data(),
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
    Ok((gw, gb, stats))
}

/// One Adam step on softmax cross-entropy. Features are plain tensors, so
/// no gradient can reach the convolutional layers.
pub fn train_classifier_step(
    head: &mut ClassifierHead,
    features: &Tensor,
    labels: &[usize],
    lr: f32,
) -> Result<ClassifierStep> {
    let (gw, gb, stats) = classifier_grads(head, features, labels)?;
    adam_step(&mut head.weights, &gw, &mut head.adam_w, lr)?;
    adam_step(&mut head.bias, &gb, &mut head.adam_b, lr)?;
    Ok(stats)
}

/// Classifier predictions for unlabeled images `[B,1,H,W]`.
pub fn predict_classifier(
    head: &ClassifierHead,
    network: &FfNetwork,
    images: &Tensor,
) -> Result<Vec<usize>> {
    let logits = head.logits(&classifier_features(network, images)?)?;
    Ok((0..logits.shape()[0]).map(|b| argmax(logits.sample(b))).collect())
}

/// `f_m` for every label `m`: goodness summed over layers 2..L of the copy
/// carrying label `m`.
pub type GoodnessScore = [f64; NUM_CLASSES];

/// Scores for each image of `[B,1,H,W]` (or `[B,H,W]`), plus the conv MACs spent.
pub fn goodness_scores(
    network: &FfNetwork,
    codec: &LabelCodec,
    images: &Tensor,
) -> Result<(Vec<GoodnessScore>, u64)> {
    let batch = images.shape()[0];
    let replicas: Vec<Tensor> = (0..batch)
        .map(|b| codec.replicate_all_labels(images.sample(b)))
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor> = replicas.iter().collect();
    let stacked = Tensor::concat(&refs)?;
    let pass = network.forward(&stacked)?;
    let g = FfNetwork::readout_goodness(&pass);
    let scores = g
        .chunks(NUM_CLASSES)
        .map(|c| c.try_into().expect("ten replicas per image"))
        .collect();
    Ok((scores, pass.conv_macs))
}

pub fn predict_goodness(
    network: &FfNetwork,
    codec: &LabelCodec,
    images: &Tensor,
) -> Result<Vec<usize>> {
    let (scores, _) = goodness_scores(network, codec, images)?;
    Ok(scores.iter().map(|s| argmax(s)).collect())
}

/// Rows are true labels, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> [u64; NUM_CLASSES] {
        self.counts.map(|r| r.iter().sum())
    }

    /// Percent correct; 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => 100.0 * self.trace() as f64 / n as f64,
        }
    }

    /// Per-class recall in percent.
    pub fn class_accuracy(&self) -> [f64; NUM_CLASSES] {
        let rows = self.row_sums();
        std::array::from_fn(|i| {
            if rows[i] == 0 {
                0.0
            } else {
                100.0 * self.counts[i][i] as f64 / rows[i] as f64
            }
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\pred");
        for c in 0..NUM_CLASSES {
            let _ = write!(s, ",{c}");
        }
        s.push('\n');
        for (t, row) in self.counts.iter().enumerate() {
            let _ = write!(s, "{t}");
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::InvalidArgument(format!("confusion CSV: {m}"));
        let mut m = ConfusionMatrix::default();
        let rows: Vec<&str> = text.lines().skip(1).filter(|l| !l.is_empty()).collect();
        if rows.len() != NUM_CLASSES {
            return Err(bad("expected 10 rows"));
        }
        for (t, line) in rows.iter().enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != NUM_CLASSES + 1 {
                return Err(bad("expected 11 columns"));
            }
            for c in 0..NUM_CLASSES {
                m.counts[t][c] = cells[c + 1].trim().parse().map_err(|_| bad("bad count"))?;
            }
        }
        Ok(m)
    }

    /// Row-normalized heat map: white for 0, dark blue for a full row.
    pub fn render_png(&self, path: &Path) -> Result<()> {
        const CELL: usize = 24;
        let side = CELL * NUM_CLASSES;
        let rows = self.row_sums();
        let mut rgb = vec![0u8; side * side * 3];
        for y in 0..side {
            for x in 0..side {
                let (t, p) = (y / CELL, x / CELL);
                let frac = if rows[t] == 0 {
                    0.0
                } else {
                    self.counts[t][p] as f64 / rows[t] as f64
                };
                // sqrt keeps small off-diagonal counts visible
                let v = frac.sqrt();
                let px = &mut rgb[(y * side + x) * 3..][..3];
                px[0] = (255.0 * (1.0 - v)) as u8;
                px[1] = (255.0 * (1.0 - 0.8 * v)) as u8;
                px[2] = (255.0 * (1.0 - 0.4 * v)) as u8;
                if x % CELL == 0 || y % CELL == 0 {
                    px.fill(200);
                }
            }
        }
        png_io::write_rgb(path, side, side, &rgb)
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub mode: InferenceMode,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
    pub predictions: Vec<usize>,
    /// Conv MACs spent by the whole evaluation.
    pub conv_macs: u64,
}

fn as_batch(ds: &Dataset, indices: std::ops::Range<usize>) -> Result<Tensor> {
    let (h, w) = ds.image_hw();
    let idx: Vec<usize> = indices.collect();
    ds.images.select(&idx).reshape(&[idx.len(), 1, h, w])
}

/// Accuracy and confusion matrix of `mode` over `dataset`.
pub fn evaluate(
    network: &FfNetwork,
    head: &ClassifierHead,
    codec: &LabelCodec,
    dataset: &Dataset,
    mode: InferenceMode,
) -> Result<Evaluation> {
    let chunk = match mode {
        InferenceMode::Classifier => CLASSIFIER_CHUNK,
        InferenceMode::Goodness => GOODNESS_CHUNK,
    };
    let mut confusion = ConfusionMatrix::default();
    let mut predictions = Vec::with_capacity(dataset.len());
    let mut conv_macs = 0;
    for start in (0..dataset.len()).step_by(chunk) {
        let end = (start + chunk).min(dataset.len());
        let batch = as_batch(dataset, start..end)?;
        let preds = match mode {
            InferenceMode::Classifier => {
                let pass = network.forward(&batch)?;
                conv_macs += pass.conv_macs;
                let logits = head.logits(&features_from_pass(&pass))?;
                (0..end - start).map(|b| argmax(logits.sample(b))).collect()
            }
            InferenceMode::Goodness => {
                let (scores, macs) = goodness_scores(network, codec, &batch)?;
                conv_macs += macs;
                scores.iter().map(|s| argmax(s)).collect::<Vec<_>>()
            }
        };
        for (i, &p) in preds.iter().enumerate() {
            confusion.record(dataset.label(start + i), p);
        }
        predictions.extend(preds);
    }
    Ok(Evaluation {
        mode,
        accuracy: confusion.accuracy(),
        confusion,
        predictions,
        conv_macs,
    })
}
