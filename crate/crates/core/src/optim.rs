//! Adam with bias correction.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    /// Zero moments sized for `params`.
    pub fn new<'a>(lr: f64, params: impl IntoIterator<Item = &'a Tensor<f32>>) -> Self {
        let sizes: Vec<usize> = params.into_iter().map(Tensor::numel).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One update of every parameter from its accumulated gradient (a missing
/// gradient counts as zero), then clears the gradients.
pub fn adam_step(params: &mut [&mut Tensor<f32>], state: &mut AdamState) -> Result<()> {
    if params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::InvalidState(format!(
            "{} parameters but moments for {}",
            params.len(),
            state.m.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if state.m[i].len() != p.numel() || state.v[i].len() != p.numel() {
            return Err(Error::InvalidState(format!(
                "parameter {i} has {} elements, moments have {}",
                p.numel(),
                state.m[i].len()
            )));
        }
    }
    state.step += 1;
    let (b1, b2) = (state.beta1 as f32, state.beta2 as f32);
    let c1 = 1.0 - libm::pow(state.beta1, state.step as f64);
    let c2 = 1.0 - libm::pow(state.beta2, state.step as f64);
    let step_size = (state.lr / c1) as f32;
    let c2_sqrt = libm::sqrt(c2) as f32;
    let eps = state.epsilon as f32;
    for (i, p) in params.iter_mut().enumerate() {
        let grad = p.grad().map(<[f32]>::to_vec);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let data = p.data_mut();
        for j in 0..data.len() {
            let g = grad.as_ref().map_or(0.0, |g| g[j]);
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            data[j] -= step_size * m[j] / (v[j].sqrt() / c2_sqrt + eps);
        }
        p.zero_grad();
    }
    Ok(())
}
