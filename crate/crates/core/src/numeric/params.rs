use rand::Rng;
use rand_distr::StandardNormal;

use super::graph::{Grads, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named, ordered collection of model parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    trainable: Vec<bool>,
}

/// The graph handles a [`ParamStore`] was bound to for one forward pass.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        self.trainable.push(true);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id.0] = trainable;
    }

    pub fn freeze_all(&mut self) {
        self.trainable.iter_mut().for_each(|t| *t = false);
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn trainable_mask(&self) -> &[bool] {
        &self.trainable
    }

    /// Places every parameter on the graph; frozen ones become constants.
    pub fn bind(&self, g: &Graph) -> Bound {
        let vars = self
            .tensors
            .iter()
            .zip(&self.trainable)
            .map(|(t, tr)| if *tr { g.leaf(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Bound { vars }
    }

    /// Places every parameter on the graph as a constant, for inference.
    pub fn bind_frozen(&self, g: &Graph) -> Bound {
        let vars = self.tensors.iter().map(|t| g.constant(t.clone())).collect();
        Bound { vars }
    }

    /// Adds the graph gradients into each tensor's `grad` buffer.
    pub fn accumulate(&mut self, grads: &Grads, bound: &Bound) {
        for (t, v) in self.tensors.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.get(*v) {
                let dst = t.grad_mut();
                dst.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }

    /// Scales all gradients by `factor`.
    pub fn scale_grads(&mut self, factor: f32) {
        for t in &mut self.tensors {
            if t.grad().is_some() {
                t.grad_mut().iter_mut().for_each(|g| *g *= factor);
            }
        }
    }

    pub fn grad_norm(&self) -> f32 {
        let sq: f64 = self
            .tensors
            .iter()
            .filter_map(Tensor::grad)
            .flat_map(|g| g.iter())
            .map(|g| (*g as f64).powi(2))
            .sum();
        sq.sqrt() as f32
    }

    /// Rescales gradients so their global norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f32) -> f32 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale_grads(max_norm / norm);
        }
        norm
    }

    /// Named tensors in insertion order, for checkpointing.
    pub fn named(&self) -> Vec<(String, Tensor)> {
        self.names
            .iter()
            .cloned()
            .zip(self.tensors.iter().map(|t| {
                let mut t = t.clone();
                t.clear_grad();
                t
            }))
            .collect()
    }

    /// Overwrites values from named tensors; every parameter must be present
    /// with a matching shape.
    pub fn load_named(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let (_, t) = named
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
            if t.shape() != self.tensors[i].shape() {
                return Err(Error::shape(
                    "load_named",
                    format!("{name}: {:?} vs {:?}", t.shape(), self.tensors[i].shape()),
                ));
            }
            self.tensors[i] = t.clone();
        }
        Ok(())
    }
}

/// Weight initializers.
pub mod init {
    use super::*;

    pub fn normal_tensor<R: Rng>(rng: &mut R, shape: &[usize], std: f32) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| standard_normal(rng) * std).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches")
    }

    /// Uniform in `±sqrt(6/(fan_in+fan_out))`.
    pub fn xavier<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
        let bound = (6.0 / (fan_in + fan_out) as f32).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches")
    }
}

/// Standard normal sample.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f32 {
    rng.sample(StandardNormal)
}
