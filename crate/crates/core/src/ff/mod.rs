//! Forward-Forward training of a stack of convolutional layers.
//!
//! Each layer scores a sample by its goodness `g = Σ y²` over raw post-ReLU
//! activations and is pushed towards `g > θ` on positive samples and
//! `g < θ` on negative ones, with `θ` the layer's activation count. Only the
//! RMS-normalized activations travel to the next layer, and no gradient
//! travels back.

mod loss;
mod network;
mod train;

pub use loss::{
    discrimination_metrics, layer_goodness, layer_loss, lr_schedule, network_loss, sigmoid,
    softplus, Discrimination, LayerLoss,
};
pub use network::{FfLayer, FfNetwork, ForwardPass, LayerActivity};
pub use train::{
    ff_train_step, layer_grads, train, EpochMetrics, LayerTally, StepStats, TrainOutcome,
};
