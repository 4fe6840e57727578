use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moment buffers for a fixed list of parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        Self {
            config,
            first: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }

    pub fn for_store(config: AdamConfig, store: &ParamStore) -> Self {
        Self::new(config, store.tensors())
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update. Parameters whose gradient is absent, or
/// whose entry in `mask` is false, are left untouched.
pub fn adam_step(params: &mut [Tensor], state: &mut AdamState, mask: Option<&[bool]>) -> Result<()> {
    if params.len() != state.first.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} params, state holds {}", params.len(), state.first.len()),
        ));
    }
    for (p, m) in params.iter().zip(&state.first) {
        if p.len() != m.len() || p.grad().is_some_and(|g| g.len() != p.len()) {
            return Err(Error::shape("adam_step", format!("parameter {:?}", p.shape())));
        }
    }
    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - (beta1 as f64).powi(t);
    let bc2 = 1.0 - (beta2 as f64).powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let Some(g) = p.grad().map(<[f32]>::to_vec) else { continue };
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            let mh = m[j] as f64 / bc1;
            let vh = v[j] as f64 / bc2;
            *w -= (lr as f64 * mh / (vh.sqrt() + eps as f64)) as f32;
        }
    }
    Ok(())
}

impl ParamStore {
    /// Adam step over the trainable parameters of this store.
    pub fn adam_step(&mut self, state: &mut AdamState) -> Result<()> {
        let mask = self.trainable_mask().to_vec();
        adam_step(self.tensors_mut(), state, Some(&mask))
    }
}
