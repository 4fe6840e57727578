//! Parallel refiner: predicts layer-2 acoustic tokens from the condition and
//! the layer-1 tokens in a single bidirectional pass.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ar::{lr_schedule, Condition, TrainReport, AUDIO_BASE, FRAMES_PER_VIDEO_FRAME};
use crate::conditioning::{Projector, EMBED_DIM};
use crate::nn::{self, Linear, Norm};
use crate::numeric::{init, AdamConfig, AdamState, Bound, Graph, ParamId, ParamStore, Segment, Tensor, Var};
use crate::transformer::{run_blocks, sinusoidal, Block, TransformerConfig};
use crate::vocab::UnifiedVocab;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NARConfig {
    pub transformer: TransformerConfig,
    pub k_acoustic: usize,
    pub seed: u64,
}

impl Default for NARConfig {
    fn default() -> Self {
        Self {
            transformer: TransformerConfig::default(),
            k_acoustic: 256,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NARTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub warmup: usize,
    pub clip: f32,
    pub seed: u64,
}

impl Default for NARTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch: 8,
            lr: 1e-3,
            warmup: 100,
            clip: 1.0,
            seed: 0,
        }
    }
}

/// One training triplet.
#[derive(Clone, Debug, PartialEq)]
pub struct NARExample {
    pub condition: Condition,
    pub layer1: Vec<usize>,
    pub layer2: Vec<usize>,
}

/// Condition rows and layer-1 rows in one packed input.
#[derive(Clone)]
struct Packed {
    /// Index into the embedding source table for each row.
    idx: Vec<usize>,
    positions: Vec<usize>,
    segment_ids: Vec<usize>,
    video: Option<Tensor>,
    /// Where the layer-1 rows start and how many there are.
    span: (usize, usize),
}

pub struct NARModel {
    pub config: NARConfig,
    pub params: ParamStore,
    vocab: UnifiedVocab,
    text_embed: ParamId,
    l1_embed: ParamId,
    segment: ParamId,
    blocks: Vec<Block>,
    ln_f: Norm,
    head: Linear,
    video_proj: Projector,
    forward_calls: AtomicUsize,
}

impl NARModel {
    pub fn new(config: NARConfig) -> Result<Self> {
        config.transformer.validate()?;
        let t = &config.transformer;
        let d = t.d_emb;
        let vocab = UnifiedVocab::new(config.k_acoustic);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        // condition tokens (text bytes and specials) share one table
        let text_embed = params.add("nar.cond_embed", init::normal_tensor(&mut rng, &[vocab.acoustic_base(), d], 0.5));
        let l1_embed = params.add("nar.l1_embed", init::normal_tensor(&mut rng, &[config.k_acoustic, d], 0.5));
        let segment = params.add("nar.segment", init::normal_tensor(&mut rng, &[2, d], 0.5));
        let blocks = (0..t.layers)
            .map(|l| Block::new(&mut params, &format!("nar.block{l}"), t, &mut rng))
            .collect();
        let ln_f = Norm::new(&mut params, "nar.ln_f", d);
        let head = Linear::new(&mut params, "nar.head", d, config.k_acoustic, &mut rng);
        let video_proj = Projector::new(&mut params, "nar.video_proj", EMBED_DIM, d, 1, &mut rng);
        Ok(Self {
            config,
            params,
            vocab,
            text_embed,
            l1_embed,
            segment,
            blocks,
            ln_f,
            head,
            video_proj,
            forward_calls: AtomicUsize::new(0),
        })
    }

    /// Number of forward passes run since construction.
    pub fn forward_calls(&self) -> usize {
        self.forward_calls.load(Ordering::Relaxed)
    }

    fn pack(&self, cond: &Condition, layer1: &[usize]) -> Result<Packed> {
        if layer1.is_empty() {
            return Err(Error::invalid("empty layer-1 sequence"));
        }
        let k = self.config.k_acoustic;
        if let Some(&bad) = layer1.iter().find(|&&i| i >= k) {
            return Err(Error::OutOfRange {
                what: "layer-1 index",
                index: bad,
                limit: k,
            });
        }
        // source table rows: [cond tokens | l1 tokens | video rows | audio prefix rows]
        let n_cond = self.vocab.acoustic_base();
        let l1_base = n_cond;
        let extra = n_cond + k;
        let mut idx = Vec::new();
        let mut positions = Vec::new();
        let mut video = None;
        match cond {
            Condition::Text(text) => {
                let ids = self.vocab.encode_text(text);
                if ids.len() + 1 > AUDIO_BASE {
                    return Err(Error::invalid(format!("condition text of {} bytes is too long", ids.len())));
                }
                idx.push(self.vocab.bos());
                positions.push(0);
                for (i, id) in ids.into_iter().enumerate() {
                    idx.push(id);
                    positions.push(i + 1);
                }
            }
            Condition::Video(f) => {
                for i in 0..f.len() {
                    idx.push(extra + i);
                    positions.push(AUDIO_BASE + FRAMES_PER_VIDEO_FRAME * i);
                }
                video = Some(f.features.clone());
            }
            Condition::Audio(_) => {
                return Err(Error::invalid("layer-2 refinement takes text or video conditions"));
            }
        }
        let start = idx.len();
        for (j, &t) in layer1.iter().enumerate() {
            idx.push(l1_base + t);
            positions.push(AUDIO_BASE + j);
        }
        if let Some(&bad) = positions.iter().find(|&&p| p >= self.config.transformer.max_positions) {
            return Err(Error::invalid(format!("position {bad} exceeds the maximum of {}", self.config.transformer.max_positions)));
        }
        let segment_ids = (0..idx.len()).map(|i| usize::from(i >= start)).collect();
        Ok(Packed {
            idx,
            positions,
            segment_ids,
            video,
            span: (start, layer1.len()),
        })
    }

    /// Logits over the layer-1 spans of all packed inputs, stacked.
    fn logits_graph(&self, g: &Graph, p: &Bound, packs: &[Packed], train_rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        self.forward_calls.fetch_add(1, Ordering::Relaxed);
        let t = &self.config.transformer;
        let mut sources = vec![p.var(self.text_embed), p.var(self.l1_embed)];
        let base = self.vocab.acoustic_base() + self.config.k_acoustic;
        let mut next = base;
        let mut idx = Vec::new();
        let mut positions = Vec::new();
        let mut seg_ids = Vec::new();
        let mut segments = Vec::new();
        let mut out_rows = Vec::new();
        for pk in packs {
            let shift = next - base;
            if let Some(f) = &pk.video {
                sources.push(self.video_proj.forward(g, p, g.constant(f.clone()))?);
                next += f.shape()[0];
            }
            let start = idx.len();
            segments.push(Segment { start, len: pk.idx.len() });
            idx.extend(pk.idx.iter().map(|&i| if i >= base { i + shift } else { i }));
            positions.extend_from_slice(&pk.positions);
            seg_ids.extend_from_slice(&pk.segment_ids);
            out_rows.extend(start + pk.span.0..start + pk.span.0 + pk.span.1);
        }
        let table = g.concat_rows(&sources)?;
        let x = g.gather_rows(table, &idx)?;
        let x = g.add(x, g.gather_rows(p.var(self.segment), &seg_ids)?)?;
        let x = g.add(x, g.constant(sinusoidal(&positions, t.d_emb)))?;
        let drop = train_rng.map(|r| (t.dropout, r));
        let h = run_blocks(g, p, &self.blocks, x, &segments, false, None, drop)?;
        let h = self.ln_f.forward(g, p, h)?;
        let h = g.gather_rows(h, &out_rows)?;
        self.head.forward(g, p, h)
    }

    /// Layer-2 logits `[T', K]`.
    pub fn forward(&self, cond: &Condition, layer1: &[usize]) -> Result<Tensor> {
        let pk = self.pack(cond, layer1)?;
        let g = Graph::new();
        let p = self.params.bind_frozen(&g);
        let l = self.logits_graph(&g, &p, &[pk], None)?;
        Ok(g.value(l))
    }

    /// Mean NLL of the layer-2 targets over all positions.
    pub fn loss(&self, cond: &Condition, layer1: &[usize], layer2: &[usize]) -> Result<f32> {
        if layer1.len() != layer2.len() {
            return Err(Error::shape("nar loss", format!("{} layer-1 vs {} layer-2 tokens", layer1.len(), layer2.len())));
        }
        let pk = self.pack(cond, layer1)?;
        let g = Graph::new();
        let p = self.params.bind_frozen(&g);
        let logits = self.logits_graph(&g, &p, &[pk], None)?;
        let targets: Vec<Option<usize>> = layer2.iter().map(|&t| Some(t)).collect();
        let l = g.cross_entropy(logits, &targets)?;
        Ok(g.scalar_value(l))
    }

    /// Per-position argmax of one forward pass; ties go to the lowest index.
    pub fn refine(&self, cond: &Condition, layer1: &[usize]) -> Result<Vec<usize>> {
        let logits = self.forward(cond, layer1)?;
        let k = self.config.k_acoustic;
        Ok(logits
            .data()
            .chunks(k)
            .map(|row| {
                let mut best = 0;
                for (i, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }

    /// Fraction of positions where `refine` reproduces the layer-2 target.
    pub fn accuracy(&self, examples: &[NARExample]) -> Result<f32> {
        let mut hit = 0usize;
        let mut total = 0usize;
        for ex in examples {
            let pred = self.refine(&ex.condition, &ex.layer1)?;
            hit += pred.iter().zip(&ex.layer2).filter(|(a, b)| a == b).count();
            total += pred.len();
        }
        if total == 0 {
            return Err(Error::invalid("accuracy over no tokens"));
        }
        Ok(hit as f32 / total as f32)
    }

    pub fn train(&mut self, examples: &[NARExample], cfg: &NARTrainConfig) -> Result<TrainReport> {
        if examples.is_empty() {
            return Err(Error::invalid("no training examples"));
        }
        let packs: Vec<(Packed, Vec<Option<usize>>)> = examples
            .iter()
            .map(|ex| {
                if ex.layer1.len() != ex.layer2.len() {
                    return Err(Error::shape("nar train", "layer lengths differ"));
                }
                Ok((self.pack(&ex.condition, &ex.layer1)?, ex.layer2.iter().map(|&t| Some(t)).collect()))
            })
            .collect::<Result<_>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut adam = AdamState::for_store(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &self.params);
        let mut order: Vec<usize> = (0..packs.len()).collect();
        let mut cursor = order.len();
        let mut report = TrainReport::default();
        for step in 0..cfg.steps {
            let mut chosen = Vec::new();
            while chosen.len() < cfg.batch.min(packs.len()) {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                chosen.push(order[cursor]);
                cursor += 1;
            }
            let batch: Vec<Packed> = chosen.iter().map(|&i| packs[i].0.clone()).collect();
            let targets: Vec<Option<usize>> = chosen.iter().flat_map(|&i| packs[i].1.iter().copied()).collect();
            let g = Graph::new();
            let p = self.params.bind(&g);
            let logits = self.logits_graph(&g, &p, &batch, Some(&mut rng))?;
            let loss = g.cross_entropy(logits, &targets)?;
            let v = nn::backprop(&g, &mut self.params, &p, loss)?;
            if !v.is_finite() {
                return Err(Error::Diverged(format!("NAR loss {v} at step {step}")));
            }
            nn::optimizer_step(&mut self.params, &mut adam, lr_schedule(cfg.lr, step, cfg.steps, cfg.warmup), cfg.clip)?;
            if step % 100 == 0 {
                log::info!("nar step {step}: loss {v:.4}");
            }
            report.losses.push(v);
        }
        Ok(report)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        nn::save_model(path, &self.config, &self.params.named())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.display().to_string()));
        }
        let (config, named): (NARConfig, _) = nn::load_model(path)?;
        let mut m = Self::new(config)?;
        m.params.load_named(&named)?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{AudioEmbedding, VideoFeatures};

    fn tiny(seed: u64) -> NARConfig {
        NARConfig {
            transformer: TransformerConfig {
                layers: 2,
                heads: 2,
                d_emb: 32,
                ffn: 64,
                max_positions: 256,
                dropout: 0.0,
            },
            k_acoustic: 16,
            seed,
        }
    }

    fn text() -> Condition {
        Condition::Text("a rising chirp plays".into())
    }

    #[test]
    fn logits_have_one_row_per_layer1_token() {
        let m = NARModel::new(tiny(0)).unwrap();
        let l = m.forward(&text(), &[1, 2, 3, 4, 5]).unwrap();
        assert_eq!(l.shape(), &[5, 16]);
        let v = VideoFeatures {
            features: Tensor::filled(&[3, EMBED_DIM], 0.2),
        };
        assert_eq!(m.forward(&Condition::Video(v), &[1, 2]).unwrap().shape(), &[2, 16]);
    }

    #[test]
    fn later_tokens_influence_earlier_outputs() {
        let m = NARModel::new(tiny(1)).unwrap();
        let a = m.forward(&text(), &[3, 3, 3, 3, 3, 3]).unwrap();
        let b = m.forward(&text(), &[3, 3, 3, 3, 3, 9]).unwrap();
        assert_ne!(a.row(0), b.row(0));
    }

    #[test]
    fn forward_is_deterministic() {
        let a = NARModel::new(tiny(2)).unwrap();
        let b = NARModel::new(tiny(2)).unwrap();
        assert_eq!(a.forward(&text(), &[0, 7, 15]).unwrap(), b.forward(&text(), &[0, 7, 15]).unwrap());
        assert_eq!(a.forward(&text(), &[0, 7, 15]).unwrap(), a.forward(&text(), &[0, 7, 15]).unwrap());
    }

    #[test]
    fn zero_head_gives_ln_k() {
        let mut m = NARModel::new(NARConfig {
            k_acoustic: 256,
            ..tiny(3)
        })
        .unwrap();
        let (w, b) = (m.head.w, m.head.b);
        m.params.get_mut(w).data_mut().fill(0.0);
        m.params.get_mut(b).data_mut().fill(0.0);
        let l = m.loss(&text(), &[1, 2, 3], &[4, 5, 6]).unwrap();
        assert!((l - 256f32.ln()).abs() < 1e-5, "{l}");
    }

    #[test]
    fn loss_matches_composed_cross_entropy() {
        let m = NARModel::new(tiny(4)).unwrap();
        let l1 = [2, 4, 6, 8];
        let l2 = [1, 0, 15, 7];
        let logits = m.forward(&text(), &l1).unwrap();
        let mut want = 0.0f64;
        for (r, &t) in l2.iter().enumerate() {
            let row = logits.row(r);
            let z: f64 = row.iter().map(|&x| (x as f64).exp()).sum();
            want -= row[t] as f64 - z.ln();
        }
        want /= l2.len() as f64;
        let got = m.loss(&text(), &l1, &l2).unwrap() as f64;
        assert!((got - want).abs() < 1e-4, "{got} vs {want}");
    }

    #[test]
    fn mismatched_lengths_and_bad_conditions_fail() {
        let m = NARModel::new(tiny(5)).unwrap();
        assert!(m.loss(&text(), &[1, 2], &[1]).is_err());
        assert!(m.forward(&text(), &[]).is_err());
        assert!(m.forward(&text(), &[16]).is_err());
        let a = Condition::Audio(AudioEmbedding(vec![0.0; EMBED_DIM]));
        assert!(m.forward(&a, &[1]).is_err());
    }

    #[test]
    fn refine_uses_one_forward_pass() {
        let m = NARModel::new(tiny(6)).unwrap();
        let l1: Vec<usize> = (0..40).map(|i| i % 16).collect();
        let before = m.forward_calls();
        let out = m.refine(&text(), &l1).unwrap();
        assert_eq!(m.forward_calls() - before, 1);
        assert_eq!(out.len(), l1.len());
        assert!(out.iter().all(|&t| t < 16));
    }

    #[test]
    fn refine_is_the_rowwise_argmax() {
        let m = NARModel::new(tiny(7)).unwrap();
        let l1 = [5, 1, 9];
        let logits = m.forward(&text(), &l1).unwrap();
        let out = m.refine(&text(), &l1).unwrap();
        for (r, &t) in out.iter().enumerate() {
            let row = logits.row(r);
            // shifting a row by a constant keeps its argmax
            let shifted: Vec<f32> = row.iter().map(|x| x + 3.5).collect();
            let best = |v: &[f32]| {
                let mut b = 0;
                for i in 0..v.len() {
                    if v[i] > v[b] {
                        b = i;
                    }
                }
                b
            };
            assert_eq!(t, best(row));
            assert_eq!(best(&shifted), best(row));
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nar.c3f");
        let m = NARModel::new(tiny(8)).unwrap();
        m.save(&path).unwrap();
        let back = NARModel::load(&path).unwrap();
        assert_eq!(m.forward(&text(), &[1, 2]).unwrap(), back.forward(&text(), &[1, 2]).unwrap());
    }
}
