use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::rng::{stream, TAG_INIT};
use crate::tensor::{
    conv2d_forward, init_conv_weights, maxpool2, relu_in_place, rms_normalize, AdamState,
    ConvSpec, Padding, Tensor,
};

use super::loss::layer_goodness;

/// One convolutional layer with its own threshold and optimizer state.
#[derive(Debug, Clone)]
pub struct FfLayer {
    pub spec: ConvSpec,
    pub weights: Tensor,
    pub bias: Tensor,
    /// Activation count per sample at this layer's resolution.
    pub theta: f64,
    pub trainable: bool,
    /// 2×2 max pooling applied to the tensor handed to the next layer.
    pub pool_after: bool,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    pub(crate) adam_w: AdamState,
    pub(crate) adam_b: AdamState,
}

impl FfLayer {
    fn new(
        spec: ConvSpec,
        weights: Tensor,
        bias: Tensor,
        in_hw: (usize, usize),
        trainable: bool,
        pool_after: bool,
    ) -> Result<Self> {
        let out_hw = spec.output_hw(in_hw.0, in_hw.1)?;
        Ok(FfLayer {
            theta: (spec.out_channels * out_hw.0 * out_hw.1) as f64,
            adam_w: AdamState::new(weights.shape()),
            adam_b: AdamState::new(bias.shape()),
            spec,
            weights,
            bias,
            trainable,
            pool_after,
            in_hw,
            out_hw,
        })
    }

    /// Activations per sample, `F·H'·W'`.
    pub fn neurons(&self) -> usize {
        self.spec.out_channels * self.out_hw.0 * self.out_hw.1
    }

    /// Spatial extents of the tensor this layer hands on.
    pub fn forwarded_hw(&self) -> (usize, usize) {
        if self.pool_after {
            (self.out_hw.0 / 2, self.out_hw.1 / 2)
        } else {
            self.out_hw
        }
    }

    /// Pool (if configured) and RMS-normalize raw activations for the next layer.
    pub fn hand_on(&self, activations: &Tensor) -> Result<Tensor> {
        if self.pool_after {
            let (pooled, _) = maxpool2(activations)?;
            Ok(rms_normalize(&pooled).0)
        } else {
            Ok(rms_normalize(activations).0)
        }
    }
}

/// What one layer saw and produced during a forward pass.
#[derive(Debug, Clone)]
pub struct LayerActivity {
    /// The tensor this layer consumed.
    pub input: Tensor,
    /// Raw post-ReLU activations `[B, F, H', W']`.
    pub activations: Tensor,
    pub goodness: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub layers: Vec<LayerActivity>,
    /// Multiply-accumulates spent in convolutions.
    pub conv_macs: u64,
}

#[derive(Debug, Clone)]
pub struct FfNetwork {
    pub layers: Vec<FfLayer>,
    pub input_hw: (usize, usize),
    pub include_first: bool,
}

impl FfNetwork {
    /// Seeded initialization. Layer `l` draws from its own stream, so the
    /// weights do not depend on flags such as `include_first_layer_loss`.
    pub fn new(cfg: &TrainConfig, input_hw: (usize, usize)) -> Result<Self> {
        cfg.validate()?;
        let shapes = Self::layer_specs(cfg)?;
        let mut layers = Vec::with_capacity(shapes.len());
        let mut hw = input_hw;
        for (l, spec) in shapes.into_iter().enumerate() {
            let (w, b) = init_conv_weights(&spec, &mut stream(cfg.seed, &[TAG_INIT, l as u64]));
            let trainable = l > 0 || cfg.include_first_layer_loss;
            let pool = cfg.pooling && l + 1 < cfg.layers();
            let layer = FfLayer::new(spec, w, b, hw, trainable, pool)?;
            hw = layer.forwarded_hw();
            if hw.0 == 0 || hw.1 == 0 {
                return Err(Error::Config(format!(
                    "layer {} leaves no spatial extent for the next layer",
                    l + 1
                )));
            }
            layers.push(layer);
        }
        Ok(FfNetwork {
            layers,
            input_hw,
            include_first: cfg.include_first_layer_loss,
        })
    }

    /// Rebuild from stored parameters; optimizer state starts fresh.
    pub fn from_parts(
        cfg: &TrainConfig,
        input_hw: (usize, usize),
        params: Vec<(Tensor, Tensor)>,
    ) -> Result<Self> {
        let mut net = Self::new(cfg, input_hw)?;
        if params.len() != net.layers.len() {
            return Err(Error::shape(
                "FfNetwork::from_parts",
                format!("{} layers stored, config has {}", params.len(), net.layers.len()),
            ));
        }
        for (layer, (w, b)) in net.layers.iter_mut().zip(params) {
            if w.shape() != layer.weights.shape() || b.shape() != layer.bias.shape() {
                return Err(Error::shape(
                    "FfNetwork::from_parts",
                    format!(
                        "stored {:?}/{:?}, expected {:?}/{:?}",
                        w.shape(),
                        b.shape(),
                        layer.weights.shape(),
                        layer.bias.shape()
                    ),
                ));
            }
            layer.weights = w;
            layer.bias = b;
        }
        Ok(net)
    }

    pub fn layer_specs(cfg: &TrainConfig) -> Result<Vec<ConvSpec>> {
        if cfg.layers() < 2 {
            return Err(Error::Config(
                "at least two layers are needed (layer 1 never feeds the readout)".into(),
            ));
        }
        let mut in_ch = 1;
        cfg.filters
            .iter()
            .map(|&f| {
                let spec = ConvSpec::new(in_ch, f, cfg.kernel, cfg.padding)?;
                in_ch = f;
                Ok(spec)
            })
            .collect()
    }

    pub fn padding(&self) -> Padding {
        self.layers[0].spec.padding
    }

    /// Total conv parameters (weights and biases).
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.spec.param_count()).sum()
    }

    /// Per-sample length of the readout features: all layers but the first.
    pub fn feature_len(&self) -> usize {
        self.layers[1..].iter().map(FfLayer::neurons).sum()
    }

    /// Conv MACs for one forward pass over `batch` samples.
    pub fn conv_macs(&self, batch: usize) -> u64 {
        self.layers
            .iter()
            .map(|l| l.spec.macs(batch, l.in_hw.0, l.in_hw.1))
            .sum()
    }

    /// Layer 1 sees `input` as-is; every later layer sees the previous
    /// layer's activations after optional pooling and RMS normalization.
    pub fn forward(&self, input: &Tensor) -> Result<ForwardPass> {
        let s = input.shape();
        if s.len() != 4 || s[1] != 1 || (s[2], s[3]) != self.input_hw {
            return Err(Error::shape(
                "FfNetwork::forward",
                format!(
                    "input must be [B, 1, {}, {}], got {s:?}",
                    self.input_hw.0, self.input_hw.1
                ),
            ));
        }
        let mut layers: Vec<LayerActivity> = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut act = conv2d_forward(&x, &layer.weights, &layer.bias, &layer.spec)?;
            relu_in_place(&mut act);
            let goodness = layer_goodness(&act);
            let next = if l + 1 < self.layers.len() {
                Some(layer.hand_on(&act)?)
            } else {
                None
            };
            layers.push(LayerActivity {
                input: x,
                activations: act,
                goodness,
            });
            match next {
                Some(n) => x = n,
                None => break,
            }
        }
        Ok(ForwardPass {
            layers,
            conv_macs: self.conv_macs(input.shape()[0]),
        })
    }

    /// `Σ y²` over every layer after the first, per sample.
    pub fn readout_goodness(pass: &ForwardPass) -> Vec<f64> {
        let batch = pass.layers[0].goodness.len();
        (0..batch)
            .map(|b| pass.layers[1..].iter().map(|l| l.goodness[b]).sum())
            .collect()
    }
}
