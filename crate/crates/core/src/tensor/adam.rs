use super::Tensor;
use crate::error::{Error, Result};

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;

/// Moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Tensor,
    v: Tensor,
    step: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamState {
    pub fn new(shape: &[usize]) -> Self {
        AdamState {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &Tensor {
        &self.m
    }

    pub fn second_moment(&self) -> &Tensor {
        &self.v
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut Tensor, grads: &Tensor, state: &mut AdamState, lr: f32) -> Result<()> {
    if params.shape() != grads.shape() || params.shape() != state.m.shape() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "params {:?}, grads {:?}, state {:?}",
                params.shape(),
                grads.shape(),
                state.m.shape()
            ),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - (b1 as f64).powi(t);
    let c2 = 1.0 - (b2 as f64).powi(t);
    let step_size = (lr as f64 / c1) as f32;
    let inv_c2_sqrt = (1.0 / c2.sqrt()) as f32;
    let eps = state.eps;
    for (((p, &g), m), v) in params
        .data_mut()
        .iter_mut()
        .zip(grads.data())
        .zip(state.m.data_mut())
        .zip(state.v.data_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        *p -= step_size * *m / (v.sqrt() * inv_c2_sqrt + eps);
    }
    Ok(())
}
