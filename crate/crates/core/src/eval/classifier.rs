//! Small event-kind classifier and the paired posterior KL built on it.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{mel_spectrogram, Waveform};
use crate::nn::{self, Linear};
use crate::numeric::{AdamConfig, AdamState, Graph, ParamStore, Tensor};
use crate::synth::SoundKind;
use crate::{Error, Result};

const N_MELS: usize = 32;
const FEATURES: usize = 2 * N_MELS;
const HIDDEN: usize = 64;
const CLASSES: usize = 4;
const PROB_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch: 32,
            lr: 3e-3,
            seed: 0,
        }
    }
}

/// Per-band mean and max of the log-mel spectrogram.
pub fn clip_features(w: &Waveform) -> Result<Vec<f32>> {
    let mel = mel_spectrogram(w, 512, 160, N_MELS)?;
    let mut mean = vec![0.0f32; N_MELS];
    let mut max = vec![f32::NEG_INFINITY; N_MELS];
    for f in 0..mel.frames {
        for (m, v) in mel.frame(f).iter().enumerate() {
            let l = (1e-3 + v).ln();
            mean[m] += l / mel.frames as f32;
            max[m] = max[m].max(l);
        }
    }
    mean.extend(max);
    Ok(mean)
}

/// Four-way event-kind classifier over [`clip_features`].
pub struct KindClassifier {
    params: ParamStore,
    hidden: Linear,
    out: Linear,
}

impl KindClassifier {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let hidden = Linear::new(&mut params, "clf.hidden", FEATURES, HIDDEN, &mut rng);
        let out = Linear::new(&mut params, "clf.out", HIDDEN, CLASSES, &mut rng);
        Self { params, hidden, out }
    }

    fn logits(&self, g: &Graph, p: &crate::numeric::Bound, feats: &[Vec<f32>]) -> Result<crate::numeric::Var> {
        let x = g.constant(Tensor::from_rows(feats)?);
        let h = g.gelu(self.hidden.forward(g, p, x)?);
        self.out.forward(g, p, h)
    }

    /// Trains on `(clip, kind)` pairs; returns the final training accuracy.
    pub fn train(&mut self, data: &[(Waveform, SoundKind)], cfg: &ClassifierConfig) -> Result<f32> {
        if data.len() < 2 {
            return Err(Error::invalid("classifier needs at least two examples"));
        }
        let feats: Vec<Vec<f32>> = data.iter().map(|(w, _)| clip_features(w)).collect::<Result<_>>()?;
        let labels: Vec<usize> = data.iter().map(|(_, k)| k.index()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut adam = AdamState::for_store(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &self.params);
        let mut order: Vec<usize> = (0..data.len()).collect();
        for step in 0..cfg.steps {
            if step % data.len().div_ceil(cfg.batch) == 0 {
                order.shuffle(&mut rng);
            }
            let start = (step * cfg.batch) % data.len();
            let idx: Vec<usize> = (0..cfg.batch.min(data.len())).map(|i| order[(start + i) % data.len()]).collect();
            let g = Graph::new();
            let p = self.params.bind(&g);
            let batch: Vec<Vec<f32>> = idx.iter().map(|&i| feats[i].clone()).collect();
            let targets: Vec<Option<usize>> = idx.iter().map(|&i| Some(labels[i])).collect();
            let logits = self.logits(&g, &p, &batch)?;
            let loss = g.cross_entropy(logits, &targets)?;
            nn::backprop(&g, &mut self.params, &p, loss)?;
            nn::optimizer_step(&mut self.params, &mut adam, cfg.lr, 5.0)?;
        }
        let post = self.posteriors_from_features(&feats)?;
        let correct = post
            .iter()
            .zip(&labels)
            .filter(|(p, l)| argmax(p) == **l)
            .count();
        Ok(correct as f32 / data.len() as f32)
    }

    fn posteriors_from_features(&self, feats: &[Vec<f32>]) -> Result<Vec<Vec<f64>>> {
        let g = Graph::new();
        let p = self.params.bind_frozen(&g);
        let logits = self.logits(&g, &p, feats)?;
        let probs = g.softmax(logits)?;
        Ok(g.with_data(probs, |d| {
            d.chunks(CLASSES).map(|r| r.iter().map(|v| *v as f64).collect()).collect()
        }))
    }

    /// Class posteriors in [`SoundKind`] order.
    pub fn posteriors(&self, clips: &[Waveform]) -> Result<Vec<Vec<f64>>> {
        if clips.is_empty() {
            return Ok(Vec::new());
        }
        let feats: Vec<Vec<f32>> = clips.iter().map(clip_features).collect::<Result<_>>()?;
        self.posteriors_from_features(&feats)
    }

    pub fn predict(&self, w: &Waveform) -> Result<SoundKind> {
        let p = self.posteriors(std::slice::from_ref(w))?;
        Ok(SoundKind::from_index(argmax(&p[0])).expect("four classes"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        nn::save_model(path, &serde_json::json!({"classes": CLASSES, "features": FEATURES}), &self.params.named())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (_, named): (serde_json::Value, _) = nn::load_model(path)?;
        let mut c = Self::new(0);
        c.params.load_named(&named)?;
        Ok(c)
    }
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

fn floored(p: &[f64]) -> Vec<f64> {
    let f: Vec<f64> = p.iter().map(|v| v.max(PROB_FLOOR)).collect();
    let s: f64 = f.iter().sum();
    f.into_iter().map(|v| v / s).collect()
}

/// `KL(p || q)` after flooring both at 1e-6 and renormalizing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::shape("kl_divergence", format!("{} vs {}", p.len(), q.len())));
    }
    let (p, q) = (floored(p), floored(q));
    Ok(p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum::<f64>().max(0.0))
}

/// Mean over pairs of `KL(p_ref || p_gen)`.
pub fn class_kl_posteriors(gen: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<f64> {
    if gen.len() != reference.len() || gen.is_empty() {
        return Err(Error::invalid("class KL needs equally many non-empty generated and reference clips"));
    }
    let mut total = 0.0;
    for (g, r) in gen.iter().zip(reference) {
        total += kl_divergence(r, g)?;
    }
    Ok(total / gen.len() as f64)
}

pub fn class_kl(gen: &[Waveform], reference: &[Waveform], classifier: &KindClassifier) -> Result<f64> {
    if gen.len() != reference.len() {
        return Err(Error::invalid("class KL needs paired sets"));
    }
    class_kl_posteriors(&classifier.posteriors(gen)?, &classifier.posteriors(reference)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_formula() {
        let p = [0.5, 0.25, 0.25, 0.0];
        let q = [0.25, 0.25, 0.25, 0.25];
        let pf: Vec<f64> = {
            let f: Vec<f64> = p.iter().map(|v: &f64| v.max(1e-6)).collect();
            let s: f64 = f.iter().sum();
            f.iter().map(|v| v / s).collect()
        };
        let expect: f64 = pf.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum();
        assert!((kl_divergence(&p, &q).unwrap() - expect).abs() < 1e-12);
        assert_eq!(kl_divergence(&q, &q).unwrap(), 0.0);
        assert!(kl_divergence(&q, &p).unwrap() > 0.0);
        assert_eq!(class_kl_posteriors(&[q.to_vec()], &[q.to_vec()]).unwrap(), 0.0);
        assert!(class_kl_posteriors(&[q.to_vec()], &[]).is_err());
    }
}
