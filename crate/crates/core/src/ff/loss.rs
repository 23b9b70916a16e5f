//! Goodness, the per-layer logistic loss and the learning-rate cooldown.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Logistic sigmoid, evaluated without overflow for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)`, equal to `-ln σ(-x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Sum of squared activations per sample, accumulated in `f64`.
pub fn layer_goodness(activations: &Tensor) -> Vec<f64> {
    (0..activations.shape()[0])
        .map(|b| {
            activations
                .sample(b)
                .iter()
                .map(|&v| v as f64 * v as f64)
                .sum()
        })
        .collect()
}

/// Per-sample outcome of one layer's goodness test.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerLoss {
    /// `σ(s·(g−θ))` with `s = +1` for positives and `-1` for negatives.
    pub probability: Vec<f64>,
    /// `−ln` of `probability`, the quantity minimized.
    pub loss: Vec<f64>,
}

pub fn layer_loss(goodness: &[f64], theta: f64, is_positive: &[bool]) -> Result<LayerLoss> {
    if theta <= 0.0 {
        return Err(Error::InvalidArgument(format!("theta must be > 0, got {theta}")));
    }
    if goodness.len() != is_positive.len() {
        return Err(Error::shape(
            "layer_loss",
            format!("{} goodness values, {} flags", goodness.len(), is_positive.len()),
        ));
    }
    let mut probability = Vec::with_capacity(goodness.len());
    let mut loss = Vec::with_capacity(goodness.len());
    for (&g, &pos) in goodness.iter().zip(is_positive) {
        let z = if pos { g - theta } else { theta - g };
        probability.push(sigmoid(z));
        loss.push(softplus(-z));
    }
    Ok(LayerLoss { probability, loss })
}

/// Mean over the batch of the summed per-layer losses.
///
/// `per_layer[l][b]` is the loss of sample `b` at layer `l`. The first layer
/// only contributes when `include_first` is set.
pub fn network_loss(per_layer: &[Vec<f64>], include_first: bool) -> Result<f64> {
    if per_layer.len() < 2 && !include_first {
        return Err(Error::InvalidArgument(
            "a single-layer network without its own loss has nothing to train".into(),
        ));
    }
    let skip = usize::from(!include_first);
    let batch = per_layer.first().map_or(0, Vec::len);
    if batch == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if per_layer.iter().any(|l| l.len() != batch) {
        return Err(Error::shape("network_loss", "layers disagree on batch size"));
    }
    let total: f64 = per_layer[skip..].iter().flatten().sum();
    Ok(total / batch as f64)
}

/// Discrimination accuracy (percent) and mean binary cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Discrimination {
    pub accuracy: f64,
    pub bce: f64,
}

/// `p_positive[b]` is `σ(g−θ)`, the layer's belief that sample `b` is positive.
pub fn discrimination_metrics(p_positive: &[f64], is_positive: &[bool]) -> Discrimination {
    let n = p_positive.len().max(1) as f64;
    let mut correct = 0usize;
    let mut bce = 0.0;
    for (&p, &pos) in p_positive.iter().zip(is_positive) {
        if (p > 0.5) == pos {
            correct += 1;
        }
        let q = if pos { p } else { 1.0 - p };
        bce -= q.max(f64::MIN_POSITIVE).ln();
    }
    Discrimination {
        accuracy: 100.0 * correct as f64 / n,
        bce: bce / n,
    }
}

/// Constant `lr` through epoch `⌈E/2⌉`, then a linear cooldown reaching
/// `2·lr/E` at `e = E`.
pub fn lr_schedule(epoch: usize, epochs: usize, lr: f32) -> Result<f32> {
    if epoch < 1 || epoch > epochs {
        return Err(Error::InvalidArgument(format!(
            "epoch {epoch} outside 1..={epochs}"
        )));
    }
    if epoch <= epochs.div_ceil(2) {
        return Ok(lr);
    }
    let e = epochs as f64;
    Ok((2.0 * lr as f64 / e * (1.0 + e - epoch as f64)) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn goodness_examples() {
        assert_eq!(layer_goodness(&Tensor::zeros(&[2, 10])), vec![0.0, 0.0]);
        assert_eq!(layer_goodness(&Tensor::full(&[1, 100], 1.0)), vec![100.0]);
        let t = Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, 0.25]).unwrap();
        let mut expect = Vec::new();
        for b in 0..2 {
            let mut acc = 0.0f64;
            for i in 0..3 {
                let v = t.data()[b * 3 + i] as f64;
                acc += v * v;
            }
            expect.push(acc);
        }
        assert_eq!(layer_goodness(&t), expect);
    }

    #[test]
    fn loss_at_threshold_and_beyond() {
        let l = layer_loss(&[5.0, 5.0], 5.0, &[true, false]).unwrap();
        assert_eq!(l.probability, vec![0.5, 0.5]);
        let l = layer_loss(&[7.0], 5.0, &[true]).unwrap();
        assert!((l.probability[0] - 0.880_797_077_977_882_3).abs() < 1e-12);
        assert!((l.loss[0] - 0.126_928_011_042_972_6).abs() < 1e-12);
        let l = layer_loss(&[1e6], 5.0, &[true]).unwrap();
        assert!(l.probability[0] == 1.0 && l.loss[0] < 1e-300);
        let l = layer_loss(&[1e6], 5.0, &[false]).unwrap();
        assert!(l.loss[0].is_finite() && (l.loss[0] - (1e6 - 5.0)).abs() < 1e-6);
        assert!(layer_loss(&[1.0], 0.0, &[true]).is_err());
    }

    #[test]
    fn network_loss_sums_layers() {
        let per = vec![vec![1.0, 3.0], vec![2.0, 4.0], vec![10.0, 20.0]];
        assert_eq!(network_loss(&per, false).unwrap(), (2.0 + 4.0 + 10.0 + 20.0) / 2.0);
        assert_eq!(network_loss(&per, true).unwrap(), (1.0 + 3.0 + 36.0) / 2.0);
        assert!(network_loss(&per[..1], false).is_err());
        assert!(network_loss(&per[..1], true).is_ok());
    }

    #[test]
    fn discrimination_examples() {
        let d = discrimination_metrics(&[0.6, 0.9, 0.4, 0.1], &[true, true, false, false]);
        assert_eq!(d.accuracy, 100.0);
        let d = discrimination_metrics(&[0.6, 0.4], &[false, true]);
        assert_eq!(d.accuracy, 0.0);
        let d = discrimination_metrics(&[0.0], &[true]);
        assert!(d.bce.is_finite());
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_schedule(1, 200, 5e-5).unwrap(), 5e-5);
        assert_eq!(lr_schedule(100, 200, 5e-5).unwrap(), 5e-5);
        let v = lr_schedule(150, 200, 5e-5).unwrap();
        assert!((v - 2.55e-5).abs() < 1e-12, "{v}");
        let end = lr_schedule(200, 200, 5e-5).unwrap();
        assert!((end - 2.0 * 5e-5 / 200.0).abs() < 1e-12);
        assert!(lr_schedule(0, 10, 1.0).is_err());
        assert!(lr_schedule(11, 10, 1.0).is_err());
        assert_eq!(lr_schedule(1, 1, 0.5).unwrap(), 0.5);
    }

    proptest! {
        #[test]
        fn schedule_non_increasing(epochs in 1usize..300, lr in 1e-6f32..1.0) {
            let mut prev = f32::INFINITY;
            for e in 1..=epochs {
                let v = lr_schedule(e, epochs, lr).unwrap();
                prop_assert!(v <= prev);
                prop_assert!(v > 0.0);
                prev = v;
            }
            let mid = epochs.div_ceil(2);
            if mid < epochs {
                let jump = lr_schedule(mid, epochs, lr).unwrap()
                    - lr_schedule(mid + 1, epochs, lr).unwrap();
                prop_assert!(jump <= 2.0 * lr / epochs as f32 * 1.0001);
            }
        }

        #[test]
        fn softplus_matches_naive(x in -30.0f64..30.0) {
            prop_assert!((softplus(x) - (1.0 + x.exp()).ln()).abs() < 1e-12);
            prop_assert!((sigmoid(x) - 1.0 / (1.0 + (-x).exp())).abs() < 1e-12);
        }
    }
}
