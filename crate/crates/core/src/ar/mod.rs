//! Decoder-only transformer over the unified vocabulary.

mod sampler;

pub use sampler::Sampler;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{AudioEmbedding, Projector, VideoFeatures, EMBED_DIM};
use crate::nn::{self, Linear, Norm};
use crate::numeric::{init, AdamConfig, AdamState, Bound, Graph, ParamId, ParamStore, Segment, Tensor, Var};
use crate::transformer::{run_blocks, sinusoidal, Block, LoraAdapters, TransformerConfig};
use crate::vocab::{Special, UnifiedVocab};
use crate::{Error, Result};

/// Acoustic frame `j` sits at position `AUDIO_BASE + j`.
pub const AUDIO_BASE: usize = 96;
/// Acoustic frames per video frame (50 Hz tokens, 10 fps video).
pub const FRAMES_PER_VIDEO_FRAME: usize = 5;
/// Projected positions for an audio-embedding condition.
pub const AUDIO_PREFIX: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    T2A,
    V2A,
    A2T,
}

impl Task {
    pub fn emits_audio(self) -> bool {
        !matches!(self, Task::A2T)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::T2A => "t2a",
            Task::V2A => "v2a",
            Task::A2T => "a2t",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t2a" => Ok(Task::T2A),
            "v2a" => Ok(Task::V2A),
            "a2t" => Ok(Task::A2T),
            other => Err(Error::invalid(format!("unknown task {other:?}"))),
        }
    }
}

/// What a sequence is conditioned on.
#[derive(Clone, Debug, PartialEq)]
pub enum Condition {
    Text(String),
    Video(VideoFeatures),
    Audio(AudioEmbedding),
}

impl Condition {
    pub fn task(&self) -> Task {
        match self {
            Condition::Text(_) => Task::T2A,
            Condition::Video(_) => Task::V2A,
            Condition::Audio(_) => Task::A2T,
        }
    }
}

/// One position of a prefix sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Item {
    Token(usize),
    /// Row of the projected video features.
    Video(usize),
    /// Row of the projected audio-embedding prefix.
    AudioPrefix(usize),
}

/// Mixed token/embedding sequence with explicit position indices.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixSequence {
    pub items: Vec<Item>,
    pub positions: Vec<usize>,
    pub video: Option<Tensor>,
    pub audio: Option<Tensor>,
    /// Index of the first item that belongs to the target.
    pub target_start: usize,
}

impl PrefixSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Token id at `i`, if that position holds a token.
    pub fn token(&self, i: usize) -> Option<usize> {
        match self.items[i] {
            Item::Token(t) => Some(t),
            _ => None,
        }
    }

    /// Appends a target token at the next position.
    pub fn push_target(&mut self, id: usize) {
        let pos = self.positions.last().map_or(0, |p| p + 1);
        self.items.push(Item::Token(id));
        self.positions.push(pos);
    }
}

/// Condition layout, without any target tokens.
pub fn condition_sequence(vocab: &UnifiedVocab, cond: &Condition) -> Result<PrefixSequence> {
    let tok = |s: Special| Item::Token(vocab.special(s));
    let mut items = vec![tok(Special::Bos)];
    let mut positions = vec![0];
    let (mut video, mut audio) = (None, None);
    match cond {
        Condition::Text(text) => {
            let ids = vocab.encode_text(text);
            if ids.len() + 2 > AUDIO_BASE {
                return Err(Error::invalid(format!("condition text of {} bytes is too long", ids.len())));
            }
            for id in ids {
                positions.push(items.len());
                items.push(Item::Token(id));
            }
            items.push(tok(Special::AudioOpen));
            positions.push(AUDIO_BASE - 1);
        }
        Condition::Video(f) => {
            if f.features.shape()[1] != EMBED_DIM {
                return Err(Error::shape("video condition", format!("feature width {}", f.features.shape()[1])));
            }
            items.push(tok(Special::VideoOpen));
            positions.push(1);
            for i in 0..f.len() {
                items.push(Item::Video(i));
                positions.push(AUDIO_BASE + FRAMES_PER_VIDEO_FRAME * i);
            }
            items.push(tok(Special::VideoClose));
            positions.push(2);
            items.push(tok(Special::AudioOpen));
            positions.push(AUDIO_BASE - 1);
            video = Some(f.features.clone());
        }
        Condition::Audio(e) => {
            items.push(tok(Special::AudioOpen));
            positions.push(1);
            for i in 0..AUDIO_PREFIX {
                items.push(Item::AudioPrefix(i));
                positions.push(2 + i);
            }
            items.push(tok(Special::AudioClose));
            positions.push(2 + AUDIO_PREFIX);
            audio = Some(Tensor::new(vec![1, e.0.len()], e.0.clone())?);
        }
    }
    let target_start = items.len();
    Ok(PrefixSequence {
        items,
        positions,
        video,
        audio,
        target_start,
    })
}

/// Full teacher-forcing sequence: condition, target ids, then `<eos>`
/// (raw id targets are taken verbatim).
pub fn training_sequence(vocab: &UnifiedVocab, cond: &Condition, target: &Target) -> Result<PrefixSequence> {
    let mut seq = condition_sequence(vocab, cond)?;
    let ids = target_ids(vocab, cond.task(), target)?;
    for id in ids {
        seq.push_target(id);
    }
    if !matches!(target, Target::Ids(_)) {
        seq.push_target(vocab.eos());
    }
    Ok(seq)
}

/// What the model should emit after the condition.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    /// Layer-1 acoustic indices in `[0, K)`.
    Audio(Vec<usize>),
    Text(String),
    /// Raw vocabulary ids in the task's range, plus `<eos>` and `<pad>`.
    Ids(Vec<usize>),
}

fn target_ids(vocab: &UnifiedVocab, task: Task, target: &Target) -> Result<Vec<usize>> {
    let ids = match target {
        Target::Audio(idx) => vocab.acoustic_to_ids(idx)?,
        Target::Text(s) => vocab.encode_text(s),
        Target::Ids(ids) => ids.clone(),
    };
    for &id in &ids {
        let raw = matches!(target, Target::Ids(_)) && (id == vocab.pad() || id == vocab.eos());
        let ok = raw
            || if task.emits_audio() {
                vocab.is_acoustic(id)
            } else {
                vocab.is_text(id)
            };
        if !ok {
            return Err(Error::invalid(format!("target id {id} is outside the {task} output range")));
        }
    }
    Ok(ids)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ARConfig {
    pub transformer: TransformerConfig,
    pub k_acoustic: usize,
    pub seed: u64,
    /// Adapter rank and alpha, when adapters are attached.
    pub lora: Option<(usize, f32)>,
}

impl Default for ARConfig {
    fn default() -> Self {
        Self {
            transformer: TransformerConfig::default(),
            k_acoustic: 256,
            seed: 0,
            lora: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ARTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub warmup: usize,
    pub clip: f32,
    pub seed: u64,
}

impl Default for ARTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 8,
            lr: 1e-3,
            warmup: 100,
            clip: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f32>,
}

impl TrainReport {
    /// Trailing moving averages over `window` steps.
    pub fn moving_average(&self, window: usize) -> Vec<f32> {
        self.losses
            .windows(window.max(1))
            .map(|w| w.iter().sum::<f32>() / w.len() as f32)
            .collect()
    }
}

/// Result of one generation call.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    /// Emitted ids, without the final `<eos>`.
    pub ids: Vec<usize>,
    pub eos: bool,
    pub truncated: bool,
}

pub struct ARModel {
    pub config: ARConfig,
    pub vocab: UnifiedVocab,
    pub params: ParamStore,
    embed: ParamId,
    blocks: Vec<Block>,
    ln_f: Norm,
    head: Linear,
    video_proj: Projector,
    audio_proj: Projector,
    lora: Option<LoraAdapters>,
}

impl ARModel {
    pub fn new(config: ARConfig) -> Result<Self> {
        config.transformer.validate()?;
        let t = &config.transformer;
        let vocab = UnifiedVocab::new(config.k_acoustic);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let d = t.d_emb;
        let embed = params.add("ar.embed", init::normal_tensor(&mut rng, &[vocab.size(), d], 0.5));
        let blocks = (0..t.layers)
            .map(|l| Block::new(&mut params, &format!("ar.block{l}"), t, &mut rng))
            .collect::<Vec<_>>();
        let ln_f = Norm::new(&mut params, "ar.ln_f", d);
        let head = Linear::new(&mut params, "ar.head", d, vocab.size(), &mut rng);
        let video_proj = Projector::new(&mut params, "ar.video_proj", EMBED_DIM, d, 1, &mut rng);
        let audio_proj = Projector::new(&mut params, "ar.audio_proj", EMBED_DIM, d, AUDIO_PREFIX, &mut rng);
        let mut model = Self {
            config: ARConfig { lora: None, ..config.clone() },
            vocab,
            params,
            embed,
            blocks,
            ln_f,
            head,
            video_proj,
            audio_proj,
            lora: None,
        };
        if let Some((rank, alpha)) = config.lora {
            model.attach_lora(rank, alpha)?;
        }
        Ok(model)
    }

    pub fn lora(&self) -> Option<&LoraAdapters> {
        self.lora.as_ref()
    }

    /// Adds zero-initialized adapters to every attention projection.
    pub fn attach_lora(&mut self, rank: usize, alpha: f32) -> Result<()> {
        if self.lora.is_some() {
            return Err(Error::invalid("adapters already attached"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x10_4a);
        self.lora = Some(LoraAdapters::new(&mut self.params, "ar.lora", &self.blocks, rank, alpha, &mut rng)?);
        self.config.lora = Some((rank, alpha));
        Ok(())
    }

    /// Freezes everything except the adapters.
    pub fn freeze_base(&mut self) -> Result<()> {
        let lora = self.lora.as_ref().ok_or_else(|| Error::invalid("no adapters attached"))?;
        let keep: Vec<ParamId> = lora.pairs.iter().flat_map(|s| s.iter().flat_map(|p| [p.a, p.b])).collect();
        let ids: Vec<ParamId> = self.params.ids().collect();
        for id in ids {
            self.params.set_trainable(id, keep.contains(&id));
        }
        Ok(())
    }

    /// Replaces the adapters with their product folded into the base weights.
    pub fn merge_lora(&self) -> Result<ARModel> {
        let lora = self.lora.as_ref().ok_or_else(|| Error::invalid("no adapters attached"))?;
        let mut store = self.params.clone();
        lora.merge_into(&mut store, &self.blocks)?;
        let mut merged = ARModel::new(ARConfig { lora: None, ..self.config.clone() })?;
        merged.params.load_named(&store.named())?;
        Ok(merged)
    }

    /// Hidden states `[sum T, D]` for packed sequences.
    fn hidden<R: Rng>(&self, g: &Graph, p: &Bound, seqs: &[&PrefixSequence], drop: Option<&mut R>) -> Result<(Var, Vec<Segment>)> {
        let t = &self.config.transformer;
        let v = self.vocab.size();
        let mut sources = vec![p.var(self.embed)];
        let mut offsets = Vec::new();
        let mut next = v;
        for s in seqs {
            if s.is_empty() {
                return Err(Error::invalid("empty sequence"));
            }
            if s.items.len() != s.positions.len() {
                return Err(Error::shape("ar", "items and positions differ in length"));
            }
            if let Some(&bad) = s.positions.iter().find(|&&q| q >= t.max_positions) {
                return Err(Error::invalid(format!("position {bad} exceeds the maximum of {}", t.max_positions)));
            }
            let mut vid = None;
            let mut aud = None;
            if let Some(f) = &s.video {
                let rows = self.video_proj.forward(g, p, g.constant(f.clone()))?;
                vid = Some(next);
                next += f.shape()[0];
                sources.push(rows);
            }
            if let Some(e) = &s.audio {
                let rows = self.audio_proj.forward(g, p, g.constant(e.clone()))?;
                aud = Some(next);
                next += AUDIO_PREFIX;
                sources.push(rows);
            }
            offsets.push((vid, aud));
        }
        let table = g.concat_rows(&sources)?;
        let mut idx = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::new();
        for (s, (vid, aud)) in seqs.iter().zip(offsets) {
            segments.push(Segment {
                start: idx.len(),
                len: s.len(),
            });
            for item in &s.items {
                idx.push(match *item {
                    Item::Token(id) => {
                        if id >= v {
                            return Err(Error::OutOfRange {
                                what: "token id",
                                index: id,
                                limit: v,
                            });
                        }
                        id
                    }
                    Item::Video(i) => vid.ok_or_else(|| Error::invalid("video item without features"))? + i,
                    Item::AudioPrefix(i) => aud.ok_or_else(|| Error::invalid("audio item without embedding"))? + i,
                });
            }
            positions.extend_from_slice(&s.positions);
        }
        let x = g.gather_rows(table, &idx)?;
        let x = g.add(x, g.constant(sinusoidal(&positions, t.d_emb)))?;
        let drop = drop.map(|r| (t.dropout, r));
        let h = run_blocks(g, p, &self.blocks, x, &segments, true, self.lora.as_ref(), drop)?;
        Ok((self.ln_f.forward(g, p, h)?, segments))
    }

    /// Logits `[T, |V|]` for one sequence.
    pub fn forward(&self, seq: &PrefixSequence) -> Result<Tensor> {
        let g = Graph::new();
        let p = self.params.bind_frozen(&g);
        let (h, _) = self.hidden::<ChaCha8Rng>(&g, &p, &[seq], None)?;
        let logits = self.head.forward(&g, &p, h)?;
        Ok(g.value(logits))
    }

    /// Next-token targets: row `t` predicts item `t + 1` inside the target.
    fn targets(&self, seq: &PrefixSequence) -> Vec<Option<usize>> {
        (0..seq.len())
            .map(|t| {
                let n = t + 1;
                if n < seq.target_start || n >= seq.len() {
                    return None;
                }
                seq.token(n).filter(|&id| id != self.vocab.pad())
            })
            .collect()
    }

    fn loss_graph<R: Rng>(&self, g: &Graph, p: &Bound, seqs: &[&PrefixSequence], drop: Option<&mut R>) -> Result<Var> {
        let (h, _) = self.hidden(g, p, seqs, drop)?;
        let logits = self.head.forward(g, p, h)?;
        let targets: Vec<Option<usize>> = seqs.iter().flat_map(|s| self.targets(s)).collect();
        g.cross_entropy(logits, &targets)
    }

    /// Mean NLL of the target tokens given the condition.
    pub fn loss(&self, cond: &Condition, target: &Target) -> Result<f32> {
        let seq = training_sequence(&self.vocab, cond, target)?;
        let g = Graph::new();
        let p = self.params.bind_frozen(&g);
        let l = self.loss_graph::<ChaCha8Rng>(&g, &p, &[&seq], None)?;
        Ok(g.scalar_value(l))
    }

    /// Mean NLL over several examples, weighting every target token equally.
    pub fn mean_loss(&self, examples: &[(Condition, Target)]) -> Result<f32> {
        let seqs: Vec<PrefixSequence> = examples
            .iter()
            .map(|(c, t)| training_sequence(&self.vocab, c, t))
            .collect::<Result<_>>()?;
        let refs: Vec<&PrefixSequence> = seqs.iter().collect();
        let g = Graph::new();
        let p = self.params.bind_frozen(&g);
        let l = self.loss_graph::<ChaCha8Rng>(&g, &p, &refs, None)?;
        Ok(g.scalar_value(l))
    }

    /// Teacher-forced training; every step samples `batch` examples.
    pub fn train(&mut self, examples: &[(Condition, Target)], cfg: &ARTrainConfig) -> Result<TrainReport> {
        if examples.is_empty() {
            return Err(Error::invalid("no training examples"));
        }
        let seqs: Vec<PrefixSequence> = examples
            .iter()
            .map(|(c, t)| training_sequence(&self.vocab, c, t))
            .collect::<Result<_>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut adam = AdamState::for_store(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &self.params);
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        let mut cursor = order.len();
        let mut report = TrainReport::default();
        for step in 0..cfg.steps {
            let mut batch = Vec::with_capacity(cfg.batch);
            while batch.len() < cfg.batch.min(seqs.len()) {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                batch.push(&seqs[order[cursor]]);
                cursor += 1;
            }
            let g = Graph::new();
            let p = self.params.bind(&g);
            let loss = self.loss_graph(&g, &p, &batch, Some(&mut rng))?;
            let v = nn::backprop(&g, &mut self.params, &p, loss)?;
            if !v.is_finite() {
                return Err(Error::Diverged(format!("AR loss {v} at step {step}")));
            }
            let lr = lr_schedule(cfg.lr, step, cfg.steps, cfg.warmup);
            nn::optimizer_step(&mut self.params, &mut adam, lr, cfg.clip)?;
            if step % 100 == 0 {
                log::info!("ar step {step}: loss {v:.4}");
            }
            report.losses.push(v);
        }
        Ok(report)
    }

    /// Ids allowed as the next token for `task`.
    pub fn allowed(&self, task: Task) -> Vec<bool> {
        (0..self.vocab.size())
            .map(|id| {
                id == self.vocab.eos()
                    || if task.emits_audio() {
                        self.vocab.is_acoustic(id)
                    } else {
                        self.vocab.is_text(id)
                    }
            })
            .collect()
    }

    /// Largest number of tokens that fit after the condition.
    pub fn max_new_tokens(&self, cond: &Condition) -> Result<usize> {
        let seq = condition_sequence(&self.vocab, cond)?;
        let last = *seq.positions.last().expect("bos");
        Ok(self.config.transformer.max_positions.saturating_sub(last + 1))
    }

    /// Samples until `<eos>` or `max_tokens`.
    pub fn generate<R: Rng>(&self, cond: &Condition, sampler: &Sampler, max_tokens: usize, rng: &mut R) -> Result<Generation> {
        let mut seq = condition_sequence(&self.vocab, cond)?;
        let limit = max_tokens.min(self.max_new_tokens(cond)?);
        let allowed = self.allowed(cond.task());
        let mut ids = Vec::new();
        let mut eos = false;
        while ids.len() < limit {
            let g = Graph::new();
            let p = self.params.bind_frozen(&g);
            let (h, _) = self.hidden::<ChaCha8Rng>(&g, &p, &[&seq], None)?;
            let last = g.slice_rows(h, seq.len() - 1, 1)?;
            let logits = g.value(self.head.forward(&g, &p, last)?).into_data();
            let next = sampler.sample(&logits, &allowed, rng)?;
            if next == self.vocab.eos() {
                eos = true;
                break;
            }
            ids.push(next);
            seq.push_target(next);
        }
        Ok(Generation {
            truncated: !eos,
            ids,
            eos,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        nn::save_model(path, &self.config, &self.params.named())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.display().to_string()));
        }
        let (config, named): (ARConfig, _) = nn::load_model(path)?;
        let mut m = Self::new(config)?;
        m.params.load_named(&named)?;
        Ok(m)
    }
}

/// Linear warmup, then cosine decay to a tenth.
pub fn lr_schedule(base: f32, step: usize, total: usize, warmup: usize) -> f32 {
    if step < warmup {
        base * (step + 1) as f32 / warmup as f32
    } else {
        nn::cosine_lr(base, step - warmup, total.saturating_sub(warmup), 0.1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> ARConfig {
        ARConfig {
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
            lora: None,
        }
    }

    fn video(n: usize) -> VideoFeatures {
        let data = (0..n * EMBED_DIM).map(|i| ((i * 37) % 11) as f32 / 11.0).collect();
        VideoFeatures {
            features: Tensor::new(vec![n, EMBED_DIM], data).unwrap(),
        }
    }

    fn unit_embedding() -> AudioEmbedding {
        let mut v = vec![0.0; EMBED_DIM];
        v[3] = 1.0;
        AudioEmbedding(v)
    }

    /// Log-softmax NLL composed by hand from raw logits.
    fn oracle_nll(logits: &Tensor, rows: &[(usize, usize)]) -> f64 {
        let v = logits.shape()[1];
        let mut total = 0.0;
        for &(r, t) in rows {
            let row = &logits.data()[r * v..(r + 1) * v];
            let m = row.iter().cloned().fold(f32::MIN, f32::max) as f64;
            let z: f64 = row.iter().map(|&x| (x as f64 - m).exp()).sum();
            total += -(row[t] as f64 - m - z.ln());
        }
        total / rows.len() as f64
    }

    #[test]
    fn forward_shape_is_sequence_by_vocab() {
        let m = ARModel::new(tiny(0)).unwrap();
        let seq = training_sequence(&m.vocab, &Condition::Text("a tone".into()), &Target::Audio(vec![1, 2, 3])).unwrap();
        let l = m.forward(&seq).unwrap();
        assert_eq!(l.shape(), &[seq.len(), m.vocab.size()]);
    }

    #[test]
    fn logits_are_causal() {
        let m = ARModel::new(tiny(1)).unwrap();
        let cond = Condition::Text("a click train plays".into());
        let a = training_sequence(&m.vocab, &cond, &Target::Audio(vec![4, 5, 6, 7, 8])).unwrap();
        let b = training_sequence(&m.vocab, &cond, &Target::Audio(vec![4, 5, 6, 9, 1])).unwrap();
        let (la, lb) = (m.forward(&a).unwrap(), m.forward(&b).unwrap());
        let v = m.vocab.size();
        let changed = a.target_start + 3;
        assert_eq!(la.data()[..changed * v], lb.data()[..changed * v]);
        assert_ne!(la.data()[changed * v..], lb.data()[changed * v..]);
    }

    #[test]
    fn same_seed_same_logits() {
        let cond = Condition::Video(video(6));
        let a = ARModel::new(tiny(5)).unwrap();
        let b = ARModel::new(tiny(5)).unwrap();
        let seq = training_sequence(&a.vocab, &cond, &Target::Audio(vec![0, 15, 3])).unwrap();
        assert_eq!(a.forward(&seq).unwrap(), b.forward(&seq).unwrap());
        assert_eq!(a.forward(&seq).unwrap(), a.forward(&seq).unwrap());
    }

    #[test]
    fn zero_head_gives_uniform_loss() {
        let mut m = ARModel::new(tiny(2)).unwrap();
        let (w, b) = (m.head.w, m.head.b);
        m.params.get_mut(w).data_mut().fill(0.0);
        m.params.get_mut(b).data_mut().fill(0.0);
        let l = m.loss(&Condition::Text("x".into()), &Target::Audio(vec![1, 2, 3, 4])).unwrap();
        assert!((l - (m.vocab.size() as f32).ln()).abs() < 1e-5, "{l}");
    }

    #[test]
    fn loss_matches_composed_cross_entropy() {
        let m = ARModel::new(tiny(3)).unwrap();
        for (cond, target) in [
            (Condition::Text("a noise burst".into()), Target::Audio(vec![3, 1, 4, 1, 5])),
            (Condition::Video(video(4)), Target::Audio(vec![9, 2, 6])),
            (Condition::Audio(unit_embedding()), Target::Text("a tone plays".into())),
        ] {
            let seq = training_sequence(&m.vocab, &cond, &target).unwrap();
            let logits = m.forward(&seq).unwrap();
            let rows: Vec<(usize, usize)> = (seq.target_start..seq.len())
                .map(|n| (n - 1, seq.token(n).unwrap()))
                .collect();
            let want = oracle_nll(&logits, &rows);
            let got = m.loss(&cond, &target).unwrap() as f64;
            assert!((got - want).abs() < 1e-4, "{got} vs {want}");
        }
    }

    #[test]
    fn trailing_pad_does_not_change_loss() {
        let m = ARModel::new(tiny(4)).unwrap();
        let v = &m.vocab;
        let cond = Condition::Text("a chirp".into());
        let body = v.acoustic_to_ids(&[2, 7, 7]).unwrap();
        let mut plain = body.clone();
        plain.push(v.eos());
        let mut padded = plain.clone();
        padded.extend([v.pad(), v.pad(), v.pad()]);
        let a = m.loss(&cond, &Target::Ids(plain)).unwrap();
        let b = m.loss(&cond, &Target::Ids(padded)).unwrap();
        assert_eq!(a, b);
        // the eos appended to structured targets matches the verbatim form
        assert_eq!(a, m.loss(&cond, &Target::Audio(vec![2, 7, 7])).unwrap());
    }

    #[test]
    fn targets_outside_the_task_range_are_rejected() {
        let m = ARModel::new(tiny(0)).unwrap();
        let text_id = m.vocab.encode_text("a")[0];
        let cond = Condition::Text("a".into());
        assert!(m.loss(&cond, &Target::Ids(vec![text_id])).is_err());
        assert!(m.loss(&cond, &Target::Audio(vec![16])).is_err());
        let acoustic = m.vocab.acoustic_to_ids(&[0]).unwrap();
        let a2t = Condition::Audio(unit_embedding());
        assert!(m.loss(&a2t, &Target::Ids(acoustic)).is_err());
    }

    #[test]
    fn generation_respects_the_task_mask() {
        let m = ARModel::new(tiny(6)).unwrap();
        let sampler = Sampler::TopK {
            k: 1000,
            temperature: 2.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for cond in [
            Condition::Text("a tone".into()),
            Condition::Video(video(3)),
            Condition::Audio(unit_embedding()),
        ] {
            let g = m.generate(&cond, &sampler, 40, &mut rng).unwrap();
            assert!(g.ids.len() <= 40);
            assert_eq!(g.truncated, !g.eos);
            for &id in &g.ids {
                if cond.task().emits_audio() {
                    assert!(m.vocab.is_acoustic(id), "{id}");
                } else {
                    assert!(m.vocab.is_text(id), "{id}");
                }
            }
        }
    }

    #[test]
    fn layouts_align_video_with_audio_positions() {
        let vocab = UnifiedVocab::new(16);
        let s = condition_sequence(&vocab, &Condition::Video(video(3))).unwrap();
        assert_eq!(s.positions, vec![0, 1, AUDIO_BASE, AUDIO_BASE + 5, AUDIO_BASE + 10, 2, AUDIO_BASE - 1]);
        let s = condition_sequence(&vocab, &Condition::Audio(unit_embedding())).unwrap();
        assert_eq!(s.items.iter().filter(|i| matches!(i, Item::AudioPrefix(_))).count(), AUDIO_PREFIX);
        let mut s = condition_sequence(&vocab, &Condition::Text("ab".into())).unwrap();
        assert_eq!(s.positions, vec![0, 1, 2, AUDIO_BASE - 1]);
        s.push_target(vocab.eos());
        assert_eq!(*s.positions.last().unwrap(), AUDIO_BASE);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ar.c3f");
        let m = ARModel::new(tiny(8)).unwrap();
        m.save(&path).unwrap();
        let back = ARModel::load(&path).unwrap();
        let seq = training_sequence(&m.vocab, &Condition::Text("q".into()), &Target::Audio(vec![1])).unwrap();
        assert_eq!(m.forward(&seq).unwrap(), back.forward(&seq).unwrap());
        assert!(matches!(
            ARModel::load(&dir.path().join("missing.c3f")),
            Err(Error::MissingCheckpoint(_))
        ));
    }

    #[test]
    fn zero_adapters_are_bit_identical() {
        let mut m = ARModel::new(tiny(9)).unwrap();
        let seq = training_sequence(&m.vocab, &Condition::Video(video(5)), &Target::Audio(vec![1, 2])).unwrap();
        let before = m.forward(&seq).unwrap();
        m.attach_lora(4, 8.0).unwrap();
        let after = m.forward(&seq).unwrap();
        let same = before.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same);
        assert!(m.attach_lora(4, 8.0).is_err());
    }

    #[test]
    fn merged_adapters_match_adapted_outputs() {
        let mut m = ARModel::new(tiny(10)).unwrap();
        m.attach_lora(4, 8.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bs: Vec<ParamId> = m.lora().unwrap().pairs.iter().flat_map(|s| s.iter().map(|p| p.b)).collect();
        for b in bs {
            for x in m.params.get_mut(b).data_mut() {
                *x = rng.gen_range(-0.2..0.2);
            }
        }
        let merged = m.merge_lora().unwrap();
        assert!(merged.lora().is_none());
        let mut worst = 0.0f32;
        for i in 0..100 {
            let len = rng.gen_range(1..12);
            let text: String = (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect();
            let target: Vec<usize> = (0..rng.gen_range(1..10)).map(|_| rng.gen_range(0..16)).collect();
            let cond = if i % 2 == 0 {
                Condition::Text(text)
            } else {
                Condition::Video(video(rng.gen_range(1..6)))
            };
            let seq = training_sequence(&m.vocab, &cond, &Target::Audio(target)).unwrap();
            let a = m.forward(&seq).unwrap();
            let b = merged.forward(&seq).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                worst = worst.max((x - y).abs());
            }
        }
        assert!(worst <= 1e-5, "{worst}");
    }

    #[test]
    fn adapter_training_leaves_base_untouched() {
        let mut m = ARModel::new(tiny(11)).unwrap();
        m.attach_lora(2, 4.0).unwrap();
        m.freeze_base().unwrap();
        let base: Vec<(String, Tensor)> = m.params.named().into_iter().filter(|(n, _)| !n.contains("lora")).collect();
        let ex = vec![(Condition::Text("a tone".into()), Target::Audio(vec![1, 2, 3]))];
        let seq = training_sequence(&m.vocab, &ex[0].0, &ex[0].1).unwrap();
        let before = m.forward(&seq).unwrap();
        m.train(&ex, &ARTrainConfig { steps: 5, batch: 1, warmup: 1, ..Default::default() }).unwrap();
        let after: Vec<(String, Tensor)> = m.params.named().into_iter().filter(|(n, _)| !n.contains("lora")).collect();
        assert_eq!(base, after);
        assert_ne!(before, m.forward(&seq).unwrap());
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        assert!(lr_schedule(1.0, 0, 100, 10) < lr_schedule(1.0, 9, 100, 10));
        assert!((lr_schedule(1.0, 9, 100, 10) - 1.0).abs() < 1e-6);
        assert!(lr_schedule(1.0, 99, 100, 10) < 0.2);
    }
}
