//! Staged training (codec, contrastive encoders, AR backbone, NAR refiner)
//! and the generation and evaluation paths built on the frozen stages.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ar::{ARConfig, ARModel, ARTrainConfig, Condition, Generation, Sampler, Target, Task, TrainReport};
use crate::audio::{AcousticTokens, Codec, CodecConfig, CodecTrainConfig, CodecTrainReport, Waveform};
use crate::conditioning::{extract_video_features, ContrastiveConfig, ContrastiveModel, ContrastiveReport};
use crate::eval::{
    cider, class_kl, config_hash, detect_onsets, frechet_embedding_distance, onset_ap, onset_count_accuracy,
    ClassifierConfig, KindClassifier, MetricReport, OnsetList,
};
use crate::nar::{NARConfig, NARExample, NARModel, NARTrainConfig};
use crate::synth::{flash_frame, Corpus, Example, SoundKind, Split, SplitRatios};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub codec: CodecConfig,
    pub codec_train: CodecTrainConfig,
    /// Training clips used for the codec (the first ones of the train split).
    pub codec_clips: usize,
    pub contrastive: ContrastiveConfig,
    pub classifier: ClassifierConfig,
    pub ar: ARConfig,
    pub ar_train: ARTrainConfig,
    pub nar: NARConfig,
    pub nar_train: NARTrainConfig,
    /// Shrinkage toward the diagonal for the embedding distance.
    pub fed_shrinkage: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            codec: CodecConfig::default(),
            codec_train: CodecTrainConfig {
                epochs: 10,
                ..CodecTrainConfig::default()
            },
            codec_clips: 1000,
            contrastive: ContrastiveConfig::default(),
            classifier: ClassifierConfig::default(),
            ar: ARConfig::default(),
            ar_train: ARTrainConfig {
                steps: 3000,
                ..ARTrainConfig::default()
            },
            nar: NARConfig::default(),
            nar_train: NARTrainConfig::default(),
            fed_shrinkage: 0.1,
        }
    }
}

impl PipelineConfig {
    /// Copy with every stage seeded from `seed`.
    pub fn seeded(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.codec_train.seed = seed;
        self.contrastive.seed = seed;
        self.classifier.seed = seed;
        self.ar.seed = seed;
        self.ar_train.seed = seed;
        self.nar.seed = seed;
        self.nar_train.seed = seed;
        self
    }
}

/// Checkpoint file layout of a workspace.
#[derive(Clone, Debug)]
pub struct Checkpoints {
    pub dir: PathBuf,
}

impl Checkpoints {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn codec(&self) -> PathBuf {
        self.dir.join("codec.c3f")
    }

    pub fn contrastive(&self) -> PathBuf {
        self.dir.join("clap.c3f")
    }

    pub fn classifier(&self) -> PathBuf {
        self.dir.join("classifier.c3f")
    }

    pub fn ar(&self) -> PathBuf {
        self.dir.join("ar.c3f")
    }

    pub fn nar(&self) -> PathBuf {
        self.dir.join("nar.c3f")
    }

    /// Errors with `MissingCheckpoint` unless `path` exists.
    pub fn require(path: &Path) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(Error::MissingCheckpoint(path.display().to_string()))
        }
    }
}

/// Both token layers of a clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipTokens {
    pub layer1: Vec<usize>,
    pub layer2: Vec<usize>,
}

pub fn clip_tokens(codec: &Codec, w: &Waveform) -> Result<ClipTokens> {
    let t = codec.tokenize(w)?;
    let mut layers = t.layers.into_iter();
    let layer1 = layers.next().ok_or_else(|| Error::invalid("codec has no layers"))?;
    let layer2 = layers.next().ok_or_else(|| Error::invalid("codec has a single layer"))?;
    Ok(ClipTokens { layer1, layer2 })
}

pub fn train_codec_stage(cfg: &PipelineConfig, train: &[Example], heldout: &[Example]) -> Result<(Codec, CodecTrainReport)> {
    let clips: Vec<Waveform> = train.iter().take(cfg.codec_clips).map(|e| e.audio.clone()).collect();
    let held: Vec<Waveform> = heldout.iter().map(|e| e.audio.clone()).collect();
    let mut codec = Codec::new(cfg.codec.clone(), cfg.seed)?;
    let report = codec.train(&clips, &held, &cfg.codec_train)?;
    Ok((codec, report))
}

/// Contrastive encoders plus the event-kind classifier used by the metrics.
pub fn train_contrastive_stage(
    cfg: &PipelineConfig,
    train: &[Example],
) -> Result<(ContrastiveModel, ContrastiveReport, KindClassifier)> {
    let pairs: Vec<(Waveform, String)> = train.iter().map(|e| (e.audio.clone(), e.caption.clone())).collect();
    let mut clap = ContrastiveModel::new(cfg.contrastive.clone())?;
    let report = clap.train(&pairs)?;
    let labelled: Vec<(Waveform, SoundKind)> = train
        .iter()
        .filter(|e| e.scene.events.len() == 1)
        .map(|e| (e.audio.clone(), e.scene.events[0].kind))
        .collect();
    let mut clf = KindClassifier::new(cfg.seed);
    let acc = clf.train(&labelled, &cfg.classifier)?;
    log::info!("kind classifier training accuracy {acc:.3}");
    Ok((clap, report, clf))
}

/// The three AR tasks for one example.
pub fn ar_examples(ex: &Example, tokens: &ClipTokens, clap: &ContrastiveModel) -> Result<Vec<(Condition, Target)>> {
    let video = extract_video_features(&ex.video)?;
    Ok(vec![
        (Condition::Text(ex.caption.clone()), Target::Audio(tokens.layer1.clone())),
        (Condition::Video(video), Target::Audio(tokens.layer1.clone())),
        (Condition::Audio(clap.embed_audio(&ex.audio)?), Target::Text(ex.caption.clone())),
    ])
}

/// NAR triplets under text and video conditions.
pub fn nar_examples(ex: &Example, tokens: &ClipTokens) -> Result<Vec<NARExample>> {
    let video = extract_video_features(&ex.video)?;
    Ok(vec![
        NARExample {
            condition: Condition::Text(ex.caption.clone()),
            layer1: tokens.layer1.clone(),
            layer2: tokens.layer2.clone(),
        },
        NARExample {
            condition: Condition::Video(video),
            layer1: tokens.layer1.clone(),
            layer2: tokens.layer2.clone(),
        },
    ])
}

pub fn train_ar_stage(
    cfg: &PipelineConfig,
    train: &[Example],
    tokens: &[ClipTokens],
    clap: &ContrastiveModel,
) -> Result<(ARModel, TrainReport)> {
    let mut examples = Vec::with_capacity(3 * train.len());
    for (ex, t) in train.iter().zip(tokens) {
        examples.extend(ar_examples(ex, t, clap)?);
    }
    let mut ar = ARModel::new(cfg.ar.clone())?;
    let report = ar.train(&examples, &cfg.ar_train)?;
    Ok((ar, report))
}

pub fn train_nar_stage(cfg: &PipelineConfig, train: &[Example], tokens: &[ClipTokens]) -> Result<(NARModel, TrainReport)> {
    let mut examples = Vec::with_capacity(2 * train.len());
    for (ex, t) in train.iter().zip(tokens) {
        examples.extend(nar_examples(ex, t)?);
    }
    let mut nar = NARModel::new(cfg.nar.clone())?;
    let report = nar.train(&examples, &cfg.nar_train)?;
    Ok((nar, report))
}

/// Frozen stages wired together for inference.
pub struct Generator {
    pub codec: Codec,
    pub clap: ContrastiveModel,
    pub ar: ARModel,
    pub nar: NARModel,
}

/// Audio produced for one condition.
#[derive(Clone, Debug)]
pub struct GeneratedAudio {
    pub tokens: AcousticTokens,
    pub audio: Waveform,
    pub generation: Generation,
}

impl Generator {
    pub fn load(ck: &Checkpoints) -> Result<Self> {
        for p in [ck.codec(), ck.contrastive(), ck.ar(), ck.nar()] {
            Checkpoints::require(&p)?;
        }
        Ok(Self {
            codec: Codec::load(&ck.codec())?,
            clap: ContrastiveModel::load(&ck.contrastive())?,
            ar: ARModel::load(&ck.ar())?,
            nar: NARModel::load(&ck.nar())?,
        })
    }

    /// Layer-1 tokens from the AR model, layer 2 from the refiner, then the
    /// codec decoder.
    pub fn generate_audio(&self, cond: &Condition, sampler: &Sampler, max_tokens: usize, seed: u64) -> Result<GeneratedAudio> {
        if !cond.task().emits_audio() {
            return Err(Error::invalid("audio generation needs a text or video condition"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let generation = self.ar.generate(cond, sampler, max_tokens, &mut rng)?;
        let mut layer1 = self.ar.vocab.ids_to_acoustic(&generation.ids)?;
        if layer1.is_empty() {
            // an immediate <eos> still decodes to one frame of silence-like output
            layer1.push(0);
        }
        let layer2 = self.nar.refine(cond, &layer1)?;
        let tokens = AcousticTokens::new(self.codec.config.sample_rate, self.codec.hop(), vec![layer1, layer2])?;
        let audio = self.codec.detokenize(&tokens)?;
        Ok(GeneratedAudio {
            tokens,
            audio,
            generation,
        })
    }

    /// Greedy caption for a clip.
    pub fn caption(&self, w: &Waveform, max_tokens: usize) -> Result<String> {
        let cond = Condition::Audio(self.clap.embed_audio(w)?);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = self.ar.generate(&cond, &Sampler::Greedy, max_tokens, &mut rng)?;
        self.ar.vocab.decode_text(&g.ids)
    }
}

/// Reference onset times of an example.
pub fn reference_onsets(ex: &Example) -> Vec<f32> {
    ex.scene.onsets()
}

/// Time of the video flash for each event of an example.
pub fn flash_times(ex: &Example) -> Vec<f32> {
    ex.scene
        .events
        .iter()
        .map(|e| flash_frame(e.onset) as f32 / ex.video.fps as f32)
        .collect()
}

/// 1 if some detected onset lies within `tol` of the first flash.
pub fn synchronized(gen: &OnsetList, flash: f32, tol: f32) -> bool {
    gen.times.iter().any(|t| (t - flash).abs() <= tol)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Single-event items scored for the audio tasks.
    pub audio_items: usize,
    /// Clips captioned for A2T.
    pub caption_items: usize,
    pub sampler: Sampler,
    pub max_tokens: usize,
    pub seed: u64,
    pub fed_shrinkage: f64,
    /// Seconds allowed between a generated onset and the video flash.
    pub sync_tolerance: f32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            audio_items: 50,
            caption_items: 100,
            sampler: Sampler::default(),
            max_tokens: 150,
            seed: 0,
            fed_shrinkage: 0.1,
            sync_tolerance: 0.1,
        }
    }
}

/// Generated clips for a task, with the examples they are scored against.
pub struct AudioRun {
    pub references: Vec<Example>,
    pub generated: Vec<GeneratedAudio>,
    pub control: Vec<GeneratedAudio>,
}

/// Generates for the first `audio_items` single-event examples of `split`,
/// plus a control whose conditions are shuffled across the split (text) or
/// deranged among the scored items (video). The control feeds the control
/// count accuracy; the control sync rate pairs the generated clips with
/// every other flash instead.
pub fn generate_for_eval(gen: &Generator, split: &[Example], task: Task, cfg: &EvalConfig) -> Result<AudioRun> {
    let chosen: Vec<usize> = (0..split.len())
        .filter(|&i| split[i].scene.events.len() == 1)
        .take(cfg.audio_items)
        .collect();
    if chosen.len() < 2 {
        return Err(Error::invalid("need at least two single-event examples"));
    }
    let shuffled = derangement(split.len(), cfg.seed ^ 0x5eed);
    let deranged = derangement(chosen.len(), cfg.seed ^ 0x5eed);
    let cond = |e: &Example| -> Result<Condition> {
        Ok(match task {
            Task::T2A => Condition::Text(e.caption.clone()),
            Task::V2A => Condition::Video(extract_video_features(&e.video)?),
            Task::A2T => return Err(Error::invalid("a2t does not generate audio")),
        })
    };
    let mut run = AudioRun {
        references: Vec::new(),
        generated: Vec::new(),
        control: Vec::new(),
    };
    for (n, &i) in chosen.iter().enumerate() {
        let e = &split[i];
        let seed = cfg.seed.wrapping_add(n as u64);
        let other = match task {
            Task::T2A => &split[shuffled[i]],
            _ => &split[chosen[deranged[n]]],
        };
        run.generated.push(gen.generate_audio(&cond(e)?, &cfg.sampler, cfg.max_tokens, seed)?);
        run.control.push(gen.generate_audio(&cond(other)?, &cfg.sampler, cfg.max_tokens, seed)?);
        run.references.push(e.clone());
    }
    Ok(run)
}

fn sync_rate(onsets: &[OnsetList], refs: &[Example], tol: f32) -> f64 {
    let hits = onsets
        .iter()
        .zip(refs)
        .filter(|(o, e)| synchronized(o, flash_times(e)[0], tol))
        .count();
    hits as f64 / onsets.len() as f64
}

/// Synchronization of clip `j` against the flash of reference `i`, averaged
/// over all ordered pairs `i != j`: the expectation of [`sync_rate`] under a
/// uniformly random derangement of the conditions.
pub fn shuffled_sync_rate(onsets: &[OnsetList], refs: &[Example], tol: f32) -> Result<f64> {
    let n = onsets.len();
    if n < 2 || refs.len() != n {
        return Err(Error::invalid("shuffled sync rate needs at least two paired clips"));
    }
    let flashes: Vec<f32> = refs.iter().map(|e| flash_times(e)[0]).collect();
    let hits = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .filter(|&(i, j)| synchronized(&onsets[j], flashes[i], tol))
        .count();
    Ok(hits as f64 / (n * (n - 1)) as f64)
}

/// Metric report for an audio run: onset_count_accuracy, onset_ap, fed and
/// class_kl, the synchronization rate, the control's count accuracy and the
/// synchronization rate against mismatched flashes.
pub fn audio_report(gen: &Generator, clf: &KindClassifier, run: &AudioRun, cfg: &EvalConfig, hash: &str) -> Result<MetricReport> {
    let n = run.references.len();
    if n == 0 || run.generated.len() != n || run.control.len() != n {
        return Err(Error::invalid("generated and reference sets must pair up"));
    }
    let audio: Vec<Waveform> = run.generated.iter().map(|g| g.audio.clone()).collect();
    let control: Vec<Waveform> = run.control.iter().map(|g| g.audio.clone()).collect();
    let ref_audio: Vec<Waveform> = run.references.iter().map(|e| e.audio.clone()).collect();
    let refs: Vec<Vec<f32>> = run.references.iter().map(reference_onsets).collect();
    let onsets: Vec<OnsetList> = audio.iter().map(detect_onsets).collect();
    let control_onsets: Vec<OnsetList> = control.iter().map(detect_onsets).collect();
    let ap = onsets.iter().zip(&refs).map(|(o, r)| onset_ap(o, r)).sum::<f64>() / n as f64;
    let embed = |ws: &[Waveform]| -> Result<Vec<Vec<f32>>> { ws.iter().map(|w| Ok(gen.clap.embed_audio(w)?.0)).collect() };
    let fed = frechet_embedding_distance(&embed(&audio)?, &embed(&ref_audio)?, Some(cfg.fed_shrinkage))?;
    let mut r = MetricReport::new(n, hash);
    r.insert("onset_count_accuracy", onset_count_accuracy(&onsets, &refs)?);
    r.insert("onset_ap", ap);
    r.insert("fed", fed);
    r.insert("class_kl", class_kl(&audio, &ref_audio, clf)?);
    r.insert("sync_rate", sync_rate(&onsets, &run.references, cfg.sync_tolerance));
    r.insert("control_onset_count_accuracy", onset_count_accuracy(&control_onsets, &refs)?);
    r.insert("control_sync_rate", shuffled_sync_rate(&onsets, &run.references, cfg.sync_tolerance)?);
    Ok(r)
}

/// Report with `cider` and the majority-caption `majority_cider`.
pub fn caption_report(gen: &Generator, train: &[Example], split: &[Example], cfg: &EvalConfig, hash: &str) -> Result<MetricReport> {
    let clips = &split[..cfg.caption_items.min(split.len())];
    let (model, base, _) = caption_scores(gen, train, clips, cfg.max_tokens)?;
    let mut r = MetricReport::new(clips.len(), hash);
    r.insert("cider", model);
    r.insert("majority_cider", base);
    Ok(r)
}

/// CIDEr of greedy captions, and of always answering the most frequent
/// training caption.
pub fn caption_scores(gen: &Generator, train: &[Example], clips: &[Example], max_tokens: usize) -> Result<(f64, f64, Vec<String>)> {
    let cands: Vec<String> = clips.iter().map(|e| gen.caption(&e.audio, max_tokens)).collect::<Result<_>>()?;
    let refs: Vec<String> = clips.iter().map(|e| e.caption.clone()).collect();
    let model = cider(&cands, &refs)?;
    let majority = vec![majority_caption(train); clips.len()];
    let base = cider(&majority, &refs)?;
    Ok((model, base, cands))
}

/// Most frequent caption; ties go to the lexicographically first.
pub fn majority_caption(examples: &[Example]) -> String {
    let mut counts = std::collections::BTreeMap::new();
    for e in examples {
        *counts.entry(e.caption.clone()).or_insert(0usize) += 1;
    }
    let mut best = (String::new(), 0);
    for (c, n) in counts {
        if n > best.1 {
            best = (c, n);
        }
    }
    best.0
}

/// A permutation of `0..n` with no fixed points.
pub fn derangement(n: usize, seed: u64) -> Vec<usize> {
    if n < 2 {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(&mut rng);
        if p.iter().enumerate().all(|(i, &j)| i != j) {
            return p;
        }
    }
}


/// Everything a command-line run reads from its config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub pipeline: PipelineConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub size: usize,
    pub seed: u64,
    pub ratios: SplitRatios,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            size: 1250,
            seed: 0,
            ratios: SplitRatios::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::invalid(format!("cannot read config {}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Applies one seed to the corpus, every stage and evaluation.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.corpus.seed = seed;
        self.pipeline = self.pipeline.seeded(seed);
        self.eval.seed = seed;
        self
    }
}

/// Provenance written next to every command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: Vec<String>,
    pub config_hash: String,
    pub seed: u64,
    /// SHA-256 over the names and bytes of every input file, in order.
    pub input_hash: String,
    pub inputs: Vec<String>,
}

impl RunRecord {
    pub fn new(command: Vec<String>, config: &RunConfig, seed: u64, inputs: &[PathBuf]) -> Result<Self> {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        let mut names = Vec::new();
        for p in inputs {
            let name = p.display().to_string();
            h.update(name.as_bytes());
            h.update([0]);
            h.update(std::fs::read(p)?);
            names.push(name);
        }
        Ok(Self {
            command,
            config_hash: config_hash(config)?,
            seed,
            input_hash: hex::encode(h.finalize()),
            inputs: names,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Manifest files of a corpus directory, in split order.
pub fn manifest_files(dir: &Path) -> Vec<PathBuf> {
    Split::ALL.iter().map(|&s| Corpus::manifest_path(dir, s)).collect()
}
