//! Paired audio/text encoders trained with a symmetric InfoNCE objective,
//! and the MLP projectors that map encoder outputs into LM space.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{mel_spectrogram, Waveform};
use crate::nn::{self, Conv, Linear};
use crate::numeric::{AdamConfig, AdamState, Bound, Graph, ParamId, ParamStore, Tensor, Var};
use crate::{Error, Result};

use super::VideoFeatures;

pub const EMBED_DIM: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveConfig {
    pub n_mels: usize,
    pub fft: usize,
    pub hop: usize,
    pub channels: usize,
    /// Hash buckets for caption unigrams and bigrams.
    pub text_buckets: usize,
    pub init_temperature: f32,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            n_mels: 32,
            fft: 512,
            hop: 160,
            channels: 64,
            text_buckets: 1024,
            init_temperature: 0.07,
            epochs: 20,
            batch: 32,
            lr: 2e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveReport {
    pub epoch_losses: Vec<f32>,
    pub temperature: f32,
}

/// A unit-norm embedding of a clip.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioEmbedding(pub Vec<f32>);

impl AudioEmbedding {
    pub fn cosine(&self, other: &AudioEmbedding) -> f32 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

/// Lowercased whitespace words.
pub fn caption_words(text: &str) -> Vec<String> {
    text.split_whitespace().map(|w| w.to_lowercase()).collect()
}

fn fnv(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

pub struct ContrastiveModel {
    pub config: ContrastiveConfig,
    params: ParamStore,
    conv1: Conv,
    conv2: Conv,
    audio_out: Linear,
    text_table: ParamId,
    text_hidden: Linear,
    text_out: Linear,
    /// Log of the inverse temperature.
    log_scale: ParamId,
    trained: bool,
}

impl ContrastiveModel {
    pub fn new(config: ContrastiveConfig) -> Result<Self> {
        if config.channels == 0 || config.text_buckets == 0 || config.n_mels == 0 {
            return Err(Error::invalid("contrastive widths must be positive"));
        }
        if !(config.init_temperature > 0.0) {
            return Err(Error::invalid("temperature must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let c = config.channels;
        let conv1 = Conv::new(&mut params, "clap.conv1", config.n_mels, c, 3, 1, 1, &mut rng);
        let conv2 = Conv::new(&mut params, "clap.conv2", c, c, 3, 2, 1, &mut rng);
        let audio_out = Linear::new(&mut params, "clap.audio_out", c, EMBED_DIM, &mut rng);
        let text_table = params.add(
            "clap.text_table",
            crate::numeric::init::normal_tensor(&mut rng, &[config.text_buckets, EMBED_DIM], 0.1),
        );
        let text_hidden = Linear::new(&mut params, "clap.text_hidden", EMBED_DIM, EMBED_DIM, &mut rng);
        let text_out = Linear::new(&mut params, "clap.text_out", EMBED_DIM, EMBED_DIM, &mut rng);
        let log_scale = params.add("clap.log_scale", Tensor::scalar((1.0 / config.init_temperature).ln()));
        Ok(Self {
            config,
            params,
            conv1,
            conv2,
            audio_out,
            text_table,
            text_hidden,
            text_out,
            log_scale,
            trained: false,
        })
    }

    pub fn temperature(&self) -> f32 {
        (-self.params.get(self.log_scale).data()[0]).exp()
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Log-compressed mel frames, channels first: `[n_mels, frames]`.
    pub fn audio_input(&self, w: &Waveform) -> Result<Tensor> {
        let c = &self.config;
        let mel = mel_spectrogram(w, c.fft, c.hop, c.n_mels)?;
        let mut data = vec![0.0; c.n_mels * mel.frames];
        for f in 0..mel.frames {
            for (m, v) in mel.frame(f).iter().enumerate() {
                data[m * mel.frames + f] = (1.0 + 100.0 * v).ln();
            }
        }
        Tensor::new(vec![c.n_mels, mel.frames], data)
    }

    /// Unigram and bigram bucket ids of a caption.
    pub fn text_input(&self, text: &str) -> Vec<usize> {
        let words = caption_words(text);
        let bucket = |s: &str| (fnv(s) % self.config.text_buckets as u64) as usize;
        let mut ids: Vec<usize> = words.iter().map(|w| bucket(w)).collect();
        ids.extend(words.windows(2).map(|p| bucket(&format!("{} {}", p[0], p[1]))));
        if ids.is_empty() {
            ids.push(bucket(""));
        }
        ids
    }

    fn audio_graph(&self, g: &Graph, p: &Bound, input: &Tensor) -> Result<Var> {
        let x = g.constant(input.clone());
        let h = g.gelu(self.conv1.forward(g, p, x)?);
        let h = g.gelu(self.conv2.forward(g, p, h)?);
        let pooled = g.mean_rows(g.transpose(h)?)?;
        let e = self.audio_out.forward(g, p, pooled)?;
        g.l2_normalize_rows(e)
    }

    fn text_graph(&self, g: &Graph, p: &Bound, ids: &[usize]) -> Result<Var> {
        let bag = g.mean_rows(g.embedding(p.var(self.text_table), ids)?)?;
        let h = g.gelu(self.text_hidden.forward(g, p, bag)?);
        let e = self.text_out.forward(g, p, h)?;
        g.l2_normalize_rows(e)
    }

    /// Symmetric InfoNCE over a batch of paired inputs.
    fn batch_loss(&self, g: &Graph, p: &Bound, audio: &[&Tensor], text: &[&[usize]]) -> Result<Var> {
        if audio.len() < 2 || audio.len() != text.len() {
            return Err(Error::invalid("contrastive loss needs at least two aligned pairs"));
        }
        let a: Vec<Var> = audio.iter().map(|x| self.audio_graph(g, p, x)).collect::<Result<_>>()?;
        let t: Vec<Var> = text.iter().map(|x| self.text_graph(g, p, x)).collect::<Result<_>>()?;
        let a = g.concat_rows(&a)?;
        let t = g.concat_rows(&t)?;
        let sim = g.matmul(a, g.transpose(t)?)?;
        let logits = g.mul_scalar(sim, g.exp(p.var(self.log_scale)))?;
        let diag: Vec<Option<usize>> = (0..audio.len()).map(Some).collect();
        let a2t = g.cross_entropy(logits, &diag)?;
        let t2a = g.cross_entropy(g.transpose(logits)?, &diag)?;
        Ok(g.scale(g.add(a2t, t2a)?, 0.5))
    }

    /// Loss of one batch of `(clip, caption)` pairs, without training.
    pub fn loss(&self, pairs: &[(Waveform, String)]) -> Result<f32> {
        let audio: Vec<Tensor> = pairs.iter().map(|(w, _)| self.audio_input(w)).collect::<Result<_>>()?;
        let text: Vec<Vec<usize>> = pairs.iter().map(|(_, c)| self.text_input(c)).collect();
        let g = Graph::new();
        let p = self.params.bind_frozen(&g);
        let l = self.batch_loss(&g, &p, &audio.iter().collect::<Vec<_>>(), &text.iter().map(|v| v.as_slice()).collect::<Vec<_>>())?;
        Ok(g.scalar_value(l))
    }

    pub fn train(&mut self, pairs: &[(Waveform, String)]) -> Result<ContrastiveReport> {
        let cfg = self.config.clone();
        if cfg.batch < 2 || pairs.len() < 2 {
            return Err(Error::invalid("contrastive training needs batches of at least two pairs"));
        }
        let audio: Vec<Tensor> = pairs.iter().map(|(w, _)| self.audio_input(w)).collect::<Result<_>>()?;
        let text: Vec<Vec<usize>> = pairs.iter().map(|(_, c)| self.text_input(c)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
        let mut adam = AdamState::for_store(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &self.params);
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let steps_per_epoch = pairs.len().div_ceil(cfg.batch);
        let total = cfg.epochs * steps_per_epoch;
        let mut report = ContrastiveReport::default();
        let mut step = 0;
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(cfg.batch) {
                if chunk.len() < 2 {
                    continue;
                }
                let g = Graph::new();
                let p = self.params.bind(&g);
                let a: Vec<&Tensor> = chunk.iter().map(|&i| &audio[i]).collect();
                let t: Vec<&[usize]> = chunk.iter().map(|&i| text[i].as_slice()).collect();
                let loss = self.batch_loss(&g, &p, &a, &t)?;
                let v = nn::backprop(&g, &mut self.params, &p, loss)?;
                if !v.is_finite() {
                    return Err(Error::Diverged(format!("contrastive loss {v} at epoch {epoch}")));
                }
                nn::optimizer_step(&mut self.params, &mut adam, nn::cosine_lr(cfg.lr, step, total, 0.1), 1.0)?;
                sum += v;
                batches += 1;
                step += 1;
            }
            let mean = sum / batches.max(1) as f32;
            log::info!("contrastive epoch {epoch}: loss {mean:.4}");
            report.epoch_losses.push(mean);
        }
        self.trained = true;
        report.temperature = self.temperature();
        Ok(report)
    }

    fn require_trained(&self) -> Result<()> {
        if self.trained {
            Ok(())
        } else {
            Err(Error::MissingCheckpoint("contrastive encoder has not been trained".into()))
        }
    }

    /// Unit-norm audio embedding.
    pub fn embed_audio(&self, w: &Waveform) -> Result<AudioEmbedding> {
        self.require_trained()?;
        self.embed_audio_untrained(w)
    }

    /// Embedding with the current weights whether or not training has run.
    pub fn embed_audio_untrained(&self, w: &Waveform) -> Result<AudioEmbedding> {
        let input = self.audio_input(w)?;
        let g = Graph::new();
        let p = self.params.bind_frozen(&g);
        let e = self.audio_graph(&g, &p, &input)?;
        Ok(AudioEmbedding(g.value(e).into_data()))
    }

    pub fn embed_text(&self, text: &str) -> Result<AudioEmbedding> {
        self.require_trained()?;
        let ids = self.text_input(text);
        let g = Graph::new();
        let p = self.params.bind_frozen(&g);
        let e = self.text_graph(&g, &p, &ids)?;
        Ok(AudioEmbedding(g.value(e).into_data()))
    }

    /// Fraction of clips whose nearest caption (by cosine) has the same text
    /// as their own. Identical captions count as the same target.
    pub fn retrieval_accuracy(&self, pairs: &[(Waveform, String)]) -> Result<f32> {
        if pairs.is_empty() {
            return Err(Error::invalid("retrieval over no pairs"));
        }
        let a: Vec<AudioEmbedding> = pairs.iter().map(|(w, _)| self.embed_audio(w)).collect::<Result<_>>()?;
        let t: Vec<AudioEmbedding> = pairs.iter().map(|(_, c)| self.embed_text(c)).collect::<Result<_>>()?;
        let mut hits = 0;
        for (i, ai) in a.iter().enumerate() {
            let mut best = 0;
            let mut best_s = f32::NEG_INFINITY;
            for (j, tj) in t.iter().enumerate() {
                let s = ai.cosine(tj);
                if s > best_s {
                    best = j;
                    best_s = s;
                }
            }
            if pairs[best].1 == pairs[i].1 {
                hits += 1;
            }
        }
        Ok(hits as f32 / pairs.len() as f32)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.require_trained()?;
        nn::save_model(path, &self.config, &self.params.named())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.display().to_string()));
        }
        let (config, named): (ContrastiveConfig, _) = nn::load_model(path)?;
        let mut m = Self::new(config)?;
        m.params.load_named(&named)?;
        m.trained = true;
        Ok(m)
    }
}

/// Two-layer MLP from a source width to `prefix_len` LM embeddings per row.
#[derive(Clone, Copy, Debug)]
pub struct Projector {
    pub hidden: Linear,
    pub out: Linear,
    pub d_in: usize,
    pub d_emb: usize,
    pub prefix_len: usize,
}

impl Projector {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_emb: usize,
        prefix_len: usize,
        rng: &mut R,
    ) -> Self {
        let hidden = Linear::new(store, &format!("{name}.hidden"), d_in, 2 * d_emb, rng);
        let out = Linear::new(store, &format!("{name}.out"), 2 * d_emb, d_emb * prefix_len, rng);
        Self {
            hidden,
            out,
            d_in,
            d_emb,
            prefix_len,
        }
    }

    /// `[N, d_in] -> [N * prefix_len, d_emb]`, rows kept in order.
    pub fn forward(&self, g: &Graph, p: &Bound, x: Var) -> Result<Var> {
        let (n, d) = (g.shape(x)[0], *g.shape(x).last().unwrap_or(&0));
        if g.shape(x).len() != 2 || d != self.d_in {
            return Err(Error::shape("projector", format!("input width {d}, expected {}", self.d_in)));
        }
        let h = g.gelu(self.hidden.forward(g, p, x)?);
        let y = self.out.forward(g, p, h)?;
        g.reshape(y, &[n * self.prefix_len, self.d_emb])
    }

    /// Evaluates the projector with frozen weights from `store`.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let y = self.forward(&g, &p, g.constant(x.clone()))?;
        Ok(g.value(y))
    }
}

/// One LM embedding per video frame.
pub fn project_video(features: &VideoFeatures, projector: &Projector, store: &ParamStore) -> Result<Tensor> {
    if projector.prefix_len != 1 {
        return Err(Error::invalid("video projector must emit one row per frame"));
    }
    projector.apply(store, &features.features)
}

/// A fixed-length LM prefix for an audio embedding.
pub fn project_audio(e: &AudioEmbedding, projector: &Projector, store: &ParamStore) -> Result<Tensor> {
    projector.apply(store, &Tensor::new(vec![1, e.0.len()], e.0.clone())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{extract_video_features, VideoFrames};
    use crate::synth::generate_example;

    fn pairs(seeds: std::ops::Range<u64>) -> Vec<(Waveform, String)> {
        seeds
            .map(|s| {
                let ex = generate_example(s);
                (ex.audio, ex.caption)
            })
            .collect()
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let m = ContrastiveModel::new(ContrastiveConfig::default()).unwrap();
        let w = generate_example(4).audio;
        assert!(m.embed_audio(&w).is_err());
        let e1 = m.embed_audio_untrained(&w).unwrap();
        let e2 = m.embed_audio_untrained(&w).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(e1.0.len(), EMBED_DIM);
        assert!((e1.cosine(&e1) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let mut m = ContrastiveModel::new(ContrastiveConfig { batch: 1, ..Default::default() }).unwrap();
        assert!(m.train(&pairs(0..4)).is_err());
        let m = ContrastiveModel::new(ContrastiveConfig::default()).unwrap();
        assert!(m.loss(&pairs(0..1)).is_err());
    }

    #[test]
    fn loss_is_invariant_under_joint_permutation() {
        let m = ContrastiveModel::new(ContrastiveConfig::default()).unwrap();
        let batch = pairs(0..6);
        let mut perm = batch.clone();
        perm.reverse();
        perm.swap(0, 3);
        let a = m.loss(&batch).unwrap();
        let b = m.loss(&perm).unwrap();
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }

    #[test]
    fn duplicated_pair_gives_tied_logits() {
        let m = ContrastiveModel::new(ContrastiveConfig::default()).unwrap();
        let p = pairs(3..4).pop().unwrap();
        let a = m.embed_audio_untrained(&p.0).unwrap();
        // identical rows in both directions: both rows of the loss are ln 2
        let loss = m.loss(&[p.clone(), p]).unwrap();
        assert!((loss - 2f32.ln()).abs() < 1e-5, "{loss}");
        assert!((a.cosine(&a) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn starting_temperature_is_configured_value() {
        let m = ContrastiveModel::new(ContrastiveConfig::default()).unwrap();
        assert!((m.temperature() - 0.07).abs() < 1e-6);
    }

    #[test]
    fn projector_shapes_and_zero_map() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let proj = Projector::new(&mut store, "p", 128, 128, 4, &mut rng);
        let e = AudioEmbedding(vec![0.1; 128]);
        let out = project_audio(&e, &proj, &store).unwrap();
        assert_eq!(out.shape(), &[4, 128]);
        let vp = Projector::new(&mut store, "v", 128, 128, 1, &mut rng);
        for t in store.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let frames = VideoFrames::blank(10, 12);
        let f = extract_video_features(&frames).unwrap();
        let out = project_video(&f, &vp, &store).unwrap();
        assert_eq!(out.shape(), &[12, 128]);
        assert!(out.data().iter().all(|v| *v == 0.0));
        let bad = Tensor::zeros(&[3, 64]);
        assert!(vp.apply(&store, &bad).is_err());
    }

    #[test]
    fn video_projection_commutes_with_frame_permutation() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vp = Projector::new(&mut store, "v", 128, 128, 1, &mut rng);
        let rows: Vec<Vec<f32>> = (0..6).map(|_| (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let perm = [4, 0, 5, 2, 1, 3];
        let permuted: Vec<Vec<f32>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let a = vp.apply(&store, &Tensor::from_rows(&rows).unwrap()).unwrap();
        let b = vp.apply(&store, &Tensor::from_rows(&permuted).unwrap()).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(b.row(k), a.row(i));
        }
    }

    #[test]
    fn short_training_separates_kinds() {
        let cfg = ContrastiveConfig { epochs: 6, ..Default::default() };
        let mut m = ContrastiveModel::new(cfg).unwrap();
        let train: Vec<(Waveform, String)> = pairs(0..200);
        let report = m.train(&train).unwrap();
        assert!(report.epoch_losses.last().unwrap() < &report.epoch_losses[0]);
        let held = pairs(1000..1064);
        let acc = m.retrieval_accuracy(&held).unwrap();
        assert!(acc > 1.0 / 64.0, "{acc}");
    }
}
