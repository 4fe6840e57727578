//! Python bindings: the synthetic corpus, the codec, the trained pipeline and
//! the metrics, over plain lists of floats and ints.

use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyValueError};
use pyo3::prelude::*;

use c3forge::ar::{Condition, Sampler};
use c3forge::audio::{mel_spectrogram, AcousticTokens, Waveform, SAMPLE_RATE};
use c3forge::conditioning::extract_video_features;
use c3forge::eval::{detect_onsets, OnsetList};
use c3forge::pipeline::{Checkpoints, Generator};
use c3forge::vocab::UnifiedVocab;

fn to_py(e: c3forge::Error) -> PyErr {
    match e {
        c3forge::Error::MissingCheckpoint(p) => PyFileNotFoundError::new_err(p),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn wave(samples: Vec<f32>, sample_rate: u32) -> PyResult<Waveform> {
    Waveform::new(samples, sample_rate).map_err(to_py)
}

fn sampler(greedy: bool, topk: usize, temperature: f32) -> Sampler {
    if greedy {
        Sampler::Greedy
    } else {
        Sampler::TopK { k: topk, temperature }
    }
}

/// One rendered corpus example.
#[pyclass(get_all, frozen)]
pub struct Example {
    pub seed: u64,
    pub caption: String,
    pub audio: Vec<f32>,
    pub sample_rate: u32,
    pub onsets: Vec<f32>,
    pub kinds: Vec<String>,
    /// Video frames, each a flattened 8x8 grayscale image.
    pub video: Vec<Vec<f32>>,
}

#[pyfunction]
fn generate_example(seed: u64) -> Example {
    let ex = c3forge::synth::generate_example(seed);
    Example {
        seed,
        caption: ex.caption.clone(),
        onsets: ex.scene.onsets(),
        kinds: ex.scene.kinds().iter().map(|k| format!("{k:?}")).collect(),
        sample_rate: ex.audio.sample_rate(),
        audio: ex.audio.into_samples(),
        video: ex.video.frames,
    }
}

/// `(time, confidence)` pairs of detected onsets.
#[pyfunction]
#[pyo3(signature = (samples, sample_rate = SAMPLE_RATE))]
fn onsets(samples: Vec<f32>, sample_rate: u32) -> PyResult<Vec<(f32, f32)>> {
    let o: OnsetList = detect_onsets(&wave(samples, sample_rate)?);
    Ok(o.times.into_iter().zip(o.confidences).collect())
}

/// Log-mel frames `[frames][n_mels]`.
#[pyfunction]
#[pyo3(signature = (samples, sample_rate = SAMPLE_RATE, fft = 512, hop = 160, n_mels = 64))]
fn mel(samples: Vec<f32>, sample_rate: u32, fft: usize, hop: usize, n_mels: usize) -> PyResult<Vec<Vec<f32>>> {
    let m = mel_spectrogram(&wave(samples, sample_rate)?, fft, hop, n_mels).map_err(to_py)?;
    Ok(m.data.chunks(m.n_mels).map(<[f32]>::to_vec).collect())
}

#[pyfunction]
fn cider(candidates: Vec<String>, references: Vec<String>) -> PyResult<f64> {
    c3forge::eval::cider(&candidates, &references).map_err(to_py)
}

/// Unified token vocabulary.
#[pyclass(name = "Vocab", frozen)]
pub struct PyVocab(UnifiedVocab);

#[pymethods]
impl PyVocab {
    #[new]
    #[pyo3(signature = (k = 256))]
    fn new(k: usize) -> Self {
        Self(UnifiedVocab::new(k))
    }

    fn __len__(&self) -> usize {
        self.0.size()
    }

    fn encode_text(&self, text: &str) -> Vec<usize> {
        self.0.encode_text(text)
    }

    fn decode_text(&self, ids: Vec<usize>) -> PyResult<String> {
        self.0.decode_text(&ids).map_err(to_py)
    }

    fn acoustic_to_ids(&self, indices: Vec<usize>) -> PyResult<Vec<usize>> {
        self.0.acoustic_to_ids(&indices).map_err(to_py)
    }

    fn ids_to_acoustic(&self, ids: Vec<usize>) -> PyResult<Vec<usize>> {
        self.0.ids_to_acoustic(&ids).map_err(to_py)
    }
}

/// A trained codec loaded from a checkpoint.
#[pyclass(name = "Codec", frozen)]
pub struct PyCodec(c3forge::audio::Codec);

#[pymethods]
impl PyCodec {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        c3forge::audio::Codec::load(&path).map(Self).map_err(to_py)
    }

    /// Untrained codec, for shape checks.
    #[staticmethod]
    #[pyo3(signature = (seed = 0))]
    fn untrained(seed: u64) -> PyResult<Self> {
        c3forge::audio::Codec::new(Default::default(), seed).map(Self).map_err(to_py)
    }

    #[getter]
    fn hop(&self) -> usize {
        self.0.hop()
    }

    /// Token layers `[layer][frame]`.
    fn tokenize(&self, samples: Vec<f32>) -> PyResult<Vec<Vec<usize>>> {
        let t = self.0.tokenize(&wave(samples, self.0.config.sample_rate)?).map_err(to_py)?;
        Ok(t.layers)
    }

    fn detokenize(&self, layers: Vec<Vec<usize>>) -> PyResult<Vec<f32>> {
        let t = AcousticTokens::new(self.0.config.sample_rate, self.0.hop(), layers).map_err(to_py)?;
        Ok(self.0.detokenize(&t).map_err(to_py)?.into_samples())
    }

    fn reconstruct(&self, samples: Vec<f32>) -> PyResult<Vec<f32>> {
        let w = wave(samples, self.0.config.sample_rate)?;
        Ok(self.0.reconstruct(&w).map_err(to_py)?.into_samples())
    }
}

/// The frozen codec, contrastive encoders, AR backbone and refiner.
#[pyclass(name = "Pipeline", frozen)]
pub struct PyPipeline(Generator);

#[pymethods]
impl PyPipeline {
    #[staticmethod]
    fn load(ckpt_dir: PathBuf) -> PyResult<Self> {
        Generator::load(&Checkpoints::new(ckpt_dir)).map(Self).map_err(to_py)
    }

    /// `(samples, [layer1, layer2])` for a caption.
    #[pyo3(signature = (text, seed = 0, max_tokens = 150, greedy = false, topk = 64, temperature = 1.0))]
    fn generate_t2a(
        &self,
        py: Python<'_>,
        text: String,
        seed: u64,
        max_tokens: usize,
        greedy: bool,
        topk: usize,
        temperature: f32,
    ) -> PyResult<(Vec<f32>, Vec<Vec<usize>>)> {
        let s = sampler(greedy, topk, temperature);
        let g = py
            .detach(|| self.0.generate_audio(&Condition::Text(text), &s, max_tokens, seed))
            .map_err(to_py)?;
        Ok((g.audio.into_samples(), g.tokens.layers))
    }

    /// Same as `generate_t2a` for video frames at 10 fps.
    #[pyo3(signature = (frames, seed = 0, max_tokens = 150, greedy = false, topk = 64, temperature = 1.0))]
    fn generate_v2a(
        &self,
        py: Python<'_>,
        frames: Vec<Vec<f32>>,
        seed: u64,
        max_tokens: usize,
        greedy: bool,
        topk: usize,
        temperature: f32,
    ) -> PyResult<(Vec<f32>, Vec<Vec<usize>>)> {
        let video = c3forge::conditioning::VideoFrames::new(c3forge::conditioning::video::FPS, frames).map_err(to_py)?;
        let cond = Condition::Video(extract_video_features(&video).map_err(to_py)?);
        let s = sampler(greedy, topk, temperature);
        let g = py.detach(|| self.0.generate_audio(&cond, &s, max_tokens, seed)).map_err(to_py)?;
        Ok((g.audio.into_samples(), g.tokens.layers))
    }

    #[pyo3(signature = (samples, max_tokens = 150))]
    fn caption(&self, py: Python<'_>, samples: Vec<f32>, max_tokens: usize) -> PyResult<String> {
        let w = wave(samples, self.0.codec.config.sample_rate)?;
        py.detach(|| self.0.caption(&w, max_tokens)).map_err(to_py)
    }
}

#[pymodule]
#[pyo3(name = "c3forge")]
pub fn c3forge_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SAMPLE_RATE", SAMPLE_RATE)?;
    m.add_class::<Example>()?;
    m.add_class::<PyVocab>()?;
    m.add_class::<PyCodec>()?;
    m.add_class::<PyPipeline>()?;
    m.add_function(wrap_pyfunction!(generate_example, m)?)?;
    m.add_function(wrap_pyfunction!(onsets, m)?)?;
    m.add_function(wrap_pyfunction!(mel, m)?)?;
    m.add_function(wrap_pyfunction!(cider, m)?)?;
    Ok(())
}
