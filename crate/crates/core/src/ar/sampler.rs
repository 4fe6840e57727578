use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Next-token selection rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Sampler {
    Greedy,
    TopK { k: usize, temperature: f32 },
}

impl Default for Sampler {
    fn default() -> Self {
        Sampler::TopK {
            k: 64,
            temperature: 1.0,
        }
    }
}

impl Sampler {
    /// Picks an id from `logits` among the `allowed` ones. Greedy ties go
    /// to the lowest id.
    pub fn sample<R: Rng>(&self, logits: &[f32], allowed: &[bool], rng: &mut R) -> Result<usize> {
        if logits.len() != allowed.len() {
            return Err(Error::shape("sample", format!("{} logits, {} mask entries", logits.len(), allowed.len())));
        }
        let mut cands: Vec<(usize, f32)> = logits
            .iter()
            .enumerate()
            .filter(|(i, v)| allowed[*i] && v.is_finite())
            .map(|(i, v)| (i, *v))
            .collect();
        if cands.is_empty() {
            return Err(Error::invalid("no allowed token has a finite logit"));
        }
        // stable sort keeps lower ids first among equal logits
        cands.sort_by(|a, b| b.1.total_cmp(&a.1));
        match *self {
            Sampler::Greedy => Ok(cands[0].0),
            Sampler::TopK { k, temperature } => {
                if k == 0 || !(temperature > 0.0) {
                    return Err(Error::invalid(format!("top-k sampler needs k > 0 and temperature > 0, got {k}, {temperature}")));
                }
                cands.truncate(k);
                let top = cands[0].1 as f64;
                let t = temperature as f64;
                let weights: Vec<f64> = cands.iter().map(|(_, v)| ((*v as f64 - top) / t).exp()).collect();
                let total: f64 = weights.iter().sum();
                let mut u = rng.gen::<f64>() * total;
                for ((id, _), w) in cands.iter().zip(&weights) {
                    if u < *w {
                        return Ok(*id);
                    }
                    u -= w;
                }
                Ok(cands[0].0)
            }
        }
    }
}
