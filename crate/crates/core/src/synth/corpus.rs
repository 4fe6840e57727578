//! Deterministic corpora: per-split JSON-lines manifests plus WAV and video files.

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{render_audio, render_caption, render_video, scene_from_seed, Scene, SoundEvent};
use crate::audio::{Waveform, SAMPLE_RATE};
use crate::conditioning::video::VideoFrames;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown split {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    /// Example counts per split; the test split takes the remainder.
    pub fn counts(&self, n: usize) -> Result<[usize; 3]> {
        let sum = self.train + self.val + self.test;
        if [self.train, self.val, self.test].iter().any(|r| *r < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("split ratios must be non-negative and sum to 1"));
        }
        let train = (n as f64 * self.train).round() as usize;
        let val = ((n as f64 * self.val).round() as usize).min(n - train);
        Ok([train, val, n - train - val])
    }
}

/// One paired example, fully in memory.
#[derive(Clone, Debug)]
pub struct Example {
    pub seed: u64,
    pub scene: Scene,
    pub audio: Waveform,
    pub caption: String,
    pub video: VideoFrames,
}

pub fn generate_example(seed: u64) -> Example {
    let scene = scene_from_seed(seed);
    Example {
        seed,
        audio: render_audio(&scene, SAMPLE_RATE),
        caption: render_caption(&scene),
        video: render_video(&scene),
        scene,
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub seed: u64,
    pub wav: String,
    pub caption: String,
    pub video: String,
    pub events: Vec<ManifestEvent>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEvent {
    pub kind: super::SoundKind,
    pub onset: f32,
    pub duration: f32,
    pub frequency: Option<f32>,
}

impl From<&SoundEvent> for ManifestEvent {
    fn from(e: &SoundEvent) -> Self {
        Self {
            kind: e.kind,
            onset: e.onset,
            duration: e.duration,
            frequency: e.frequency,
        }
    }
}

/// Scene seeds per split, drawn without repeats from the corpus seed.
pub fn split_seeds(seed: u64, n: usize, ratios: SplitRatios) -> Result<Vec<(Split, Vec<u64>)>> {
    if n < 10 {
        return Err(Error::invalid(format!("corpus needs at least 10 examples, got {n}")));
    }
    let counts = ratios.counts(n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut all = Vec::with_capacity(n);
    while all.len() < n {
        // keep seeds exactly representable as JSON numbers
        let s = rng.gen::<u64>() >> 12;
        if seen.insert(s) {
            all.push(s);
        }
    }
    let mut out = Vec::new();
    let mut start = 0;
    for (split, c) in Split::ALL.into_iter().zip(counts) {
        out.push((split, all[start..start + c].to_vec()));
        start += c;
    }
    Ok(out)
}

/// In-memory corpus split into train/val/test.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

impl Corpus {
    pub fn generate(seed: u64, n: usize, ratios: SplitRatios) -> Result<Self> {
        let mut c = Corpus::default();
        for (split, seeds) in split_seeds(seed, n, ratios)? {
            *c.split_mut(split) = seeds.into_iter().map(generate_example).collect();
        }
        Ok(c)
    }

    pub fn split(&self, s: Split) -> &[Example] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, s: Split) -> &mut Vec<Example> {
        match s {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    pub fn manifest_path(dir: &Path, split: Split) -> PathBuf {
        dir.join(format!("manifest_{split}.jsonl"))
    }

    /// Reads one split back from a corpus directory, re-deriving each scene
    /// from the manifest fields.
    pub fn load_split(dir: &Path, split: Split) -> Result<Vec<Example>> {
        let path = Self::manifest_path(dir, split);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::invalid(format!("cannot read manifest {}: {e}", path.display())))?;
        let mut out = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let rec: ManifestRecord = serde_json::from_str(line)?;
            let audio = Waveform::read_wav(&dir.join(&rec.wav))?;
            let video = VideoFrames::read(&dir.join(&rec.video))?;
            out.push(Example {
                seed: rec.seed,
                scene: scene_from_seed(rec.seed),
                audio,
                caption: rec.caption,
                video,
            });
        }
        Ok(out)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut c = Corpus::default();
        for s in Split::ALL {
            *c.split_mut(s) = Self::load_split(dir, s)?;
        }
        Ok(c)
    }
}

/// Renders `n` examples into `dir`: `wav/<seed>.wav`, `video/<seed>.json`
/// and `manifest_<split>.jsonl`. Returns the manifest records per split.
pub fn build_corpus(dir: &Path, seed: u64, n: usize, ratios: SplitRatios) -> Result<Vec<(Split, Vec<ManifestRecord>)>> {
    let splits = split_seeds(seed, n, ratios)?;
    std::fs::create_dir_all(dir.join("wav"))?;
    std::fs::create_dir_all(dir.join("video"))?;
    let mut out = Vec::new();
    for (split, seeds) in splits {
        let mut records = Vec::with_capacity(seeds.len());
        let mut manifest = std::io::BufWriter::new(std::fs::File::create(Corpus::manifest_path(dir, split))?);
        for s in seeds {
            let ex = generate_example(s);
            let wav = format!("wav/{s}.wav");
            let video = format!("video/{s}.json");
            ex.audio.write_wav(&dir.join(&wav))?;
            ex.video.write(&dir.join(&video))?;
            let rec = ManifestRecord {
                seed: s,
                wav,
                caption: ex.caption,
                video,
                events: ex.scene.events.iter().map(ManifestEvent::from).collect(),
            };
            writeln!(manifest, "{}", serde_json::to_string(&rec)?)?;
            records.push(rec);
        }
        manifest.flush()?;
        out.push((split, records));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_and_disjointness() {
        let s = split_seeds(1, 1000, SplitRatios::default()).unwrap();
        let sizes: Vec<usize> = s.iter().map(|(_, v)| v.len()).collect();
        assert_eq!(sizes, vec![800, 100, 100]);
        let mut all: Vec<u64> = s.iter().flat_map(|(_, v)| v.clone()).collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 1000);
        assert!(split_seeds(1, 9, SplitRatios::default()).is_err());
    }

    #[test]
    fn rebuild_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        build_corpus(a.path(), 5, 12, SplitRatios::default()).unwrap();
        build_corpus(b.path(), 5, 12, SplitRatios::default()).unwrap();
        for s in Split::ALL {
            let ma = std::fs::read(Corpus::manifest_path(a.path(), s)).unwrap();
            let mb = std::fs::read(Corpus::manifest_path(b.path(), s)).unwrap();
            assert_eq!(ma, mb);
        }
        let loaded = Corpus::load(a.path()).unwrap();
        let direct = Corpus::generate(5, 12, SplitRatios::default()).unwrap();
        assert_eq!(loaded.train.len(), direct.train.len());
        for (x, y) in loaded.train.iter().zip(&direct.train) {
            assert_eq!(x.caption, y.caption);
            assert_eq!(x.audio, y.audio.quantized_pcm16());
            assert_eq!(x.video, y.video);
        }
    }
}
