//! Parameterized layers on top of the graph, and model file helpers.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::numeric::{checkpoint, init, AdamState, Bound, Graph, ParamId, ParamStore, Tensor, Var};
use crate::Result;

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let w = store.add(format!("{name}.w"), init::xavier(rng, &[fan_in, fan_out], fan_in, fan_out));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self { w, b }
    }

    /// A linear layer with zero weights and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out]));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self { w, b }
    }

    pub fn forward(&self, g: &Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.w))?;
        g.add_row(y, p.var(self.b))
    }
}

/// Layer norm gain and bias.
#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.g"), Tensor::filled(&[dim], 1.0));
        let beta = store.add(format!("{name}.b"), Tensor::zeros(&[dim]));
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.var(self.gamma), p.var(self.beta), 1e-5)
    }
}

/// 1-D convolution `w: [c_out, c_in, k]`.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), init::xavier(rng, &[c_out, c_in, k], c_in * k, c_out * k));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[c_out]));
        Self { w, b, stride, pad }
    }

    pub fn forward(&self, g: &Graph, p: &Bound, x: Var) -> Result<Var> {
        g.conv1d(x, p.var(self.w), p.var(self.b), self.stride, self.pad)
    }
}

/// Transposed 1-D convolution `w: [c_in, c_out, k]`.
#[derive(Clone, Copy, Debug)]
pub struct ConvT {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvT {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        // fan-in of each output sample is c_in * k / stride
        let fan_in = (c_in * k / stride).max(1);
        let w = store.add(format!("{name}.w"), init::xavier(rng, &[c_in, c_out, k], fan_in, c_out));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[c_out]));
        Self { w, b, stride, pad }
    }

    pub fn forward(&self, g: &Graph, p: &Bound, x: Var) -> Result<Var> {
        g.conv_transpose1d(x, p.var(self.w), p.var(self.b), self.stride, self.pad)
    }
}

/// Backward from `loss`, then accumulate into the store.
pub fn backprop(g: &Graph, store: &mut ParamStore, bound: &Bound, loss: Var) -> Result<f32> {
    let grads = g.backward(loss)?;
    store.accumulate(&grads, bound);
    Ok(g.scalar_value(loss))
}

/// Clip, step, and clear gradients.
pub fn optimizer_step(store: &mut ParamStore, adam: &mut AdamState, lr: f32, clip: f32) -> Result<()> {
    store.clip_grad_norm(clip);
    adam.config.lr = lr;
    store.adam_step(adam)?;
    store.zero_grads();
    Ok(())
}

/// Cosine decay from `base` to `base * floor` over `total` steps.
pub fn cosine_lr(base: f32, step: usize, total: usize, floor: f32) -> f32 {
    let t = (step as f32 / total.max(1) as f32).min(1.0);
    base * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f32::consts::PI * t).cos()))
}

/// JSON sidecar path for a `.c3f` checkpoint.
pub fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes `tensors` to `path` and `config` next to it.
pub fn save_model<C: Serialize>(path: &Path, config: &C, tensors: &[(String, Tensor)]) -> Result<()> {
    checkpoint::save(path, tensors)?;
    std::fs::write(sidecar(path), serde_json::to_string_pretty(config)?)?;
    Ok(())
}

pub fn load_model<C: DeserializeOwned>(path: &Path) -> Result<(C, Vec<(String, Tensor)>)> {
    let tensors = checkpoint::load(path)?;
    let cfg = std::fs::read_to_string(sidecar(path))
        .map_err(|_| crate::Error::MissingCheckpoint(sidecar(path).display().to_string()))?;
    Ok((serde_json::from_str(&cfg)?, tensors))
}
