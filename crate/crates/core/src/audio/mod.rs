//! Waveforms, WAV I/O, mel analysis, residual vector quantization and the codec.

pub mod codec;
pub mod rvq;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numeric::kernels::{mel_filterbank, Stft};
use crate::numeric::{Graph, Tensor, Var};
use crate::{Error, Result};

pub use codec::{codec_loss, codec_loss_with, Codec, CodecConfig, CodecTrainConfig, CodecTrainReport, LatentFrames, LossConfig};
pub use rvq::{rvq_dequantize, rvq_quantize, AcousticTokens, CodebookSet, Quantized};

pub const SAMPLE_RATE: u32 = 16_000;

/// Mono PCM audio.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    /// Samples are clamped to `[-1, 1]`; empty or non-finite input is rejected.
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("empty waveform"));
        }
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("waveform"));
        }
        let samples = samples.into_iter().map(|s| s.clamp(-1.0, 1.0)).collect();
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f32 {
        self.samples.len() as f32 / self.sample_rate as f32
    }

    /// Reads 16-bit PCM or 32-bit float mono WAV.
    pub fn read_wav(path: &Path) -> Result<Self> {
        let mut reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(Error::invalid(format!("expected mono WAV, got {} channels", spec.channels)));
        }
        let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
            (hound::SampleFormat::Int, 16) => reader
                .samples::<i16>()
                .map(|s| s.map(|v| v as f32 / 32768.0))
                .collect::<std::result::Result<_, _>>()?,
            (hound::SampleFormat::Float, 32) => reader.samples::<f32>().collect::<std::result::Result<_, _>>()?,
            (fmt, bits) => {
                return Err(Error::invalid(format!("unsupported WAV encoding {fmt:?}/{bits}")));
            }
        };
        Self::new(samples, spec.sample_rate)
    }

    /// Writes 16-bit PCM little-endian mono.
    pub fn write_wav(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            w.write_sample(pcm16(s))?;
        }
        w.finalize()?;
        Ok(())
    }

    /// The waveform after a 16-bit PCM round trip.
    pub fn quantized_pcm16(&self) -> Self {
        Self {
            samples: self.samples.iter().map(|&s| pcm16(s) as f32 / 32768.0).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

fn pcm16(s: f32) -> i16 {
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Mel magnitudes, `[frames, n_mels]` row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelSpectrogram {
    pub frames: usize,
    pub n_mels: usize,
    pub fft: usize,
    pub hop: usize,
    pub data: Vec<f32>,
}

impl MelSpectrogram {
    pub fn frame(&self, i: usize) -> &[f32] {
        &self.data[i * self.n_mels..(i + 1) * self.n_mels]
    }

    /// One line per frame, comma separated.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for f in 0..self.frames {
            let row: Vec<String> = self.frame(f).iter().map(|v| format!("{v:.6}")).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Binary greyscale PGM with time on the x axis and low frequencies at
    /// the bottom, log-compressed.
    pub fn to_pgm(&self) -> Vec<u8> {
        let logs: Vec<f32> = self.data.iter().map(|v| (v + 1e-5).ln()).collect();
        let max = logs.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let min = max - 10.0;
        let mut out = format!("P5\n{} {}\n255\n", self.frames, self.n_mels).into_bytes();
        for m in (0..self.n_mels).rev() {
            for f in 0..self.frames {
                let v = (logs[f * self.n_mels + m] - min) / (max - min);
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out
    }
}

fn check_stft_args(len: usize, fft: usize, hop: usize) -> Result<()> {
    if !fft.is_power_of_two() {
        return Err(Error::invalid(format!("fft size {fft} is not a power of two")));
    }
    if hop == 0 || hop > fft {
        return Err(Error::invalid(format!("hop {hop} must be in 1..={fft}")));
    }
    if fft > len {
        return Err(Error::invalid(format!("fft size {fft} exceeds signal length {len}")));
    }
    Ok(())
}

/// Mel filterbank projection of Hann-windowed STFT magnitudes.
pub fn mel_spectrogram(w: &Waveform, fft: usize, hop: usize, n_mels: usize) -> Result<MelSpectrogram> {
    check_stft_args(w.len(), fft, hop)?;
    if n_mels == 0 {
        return Err(Error::invalid("n_mels must be positive"));
    }
    let stft = Stft::new(fft, hop);
    let (mags, _) = stft.magnitude(w.samples());
    let bins = stft.bins();
    let frames = mags.len() / bins;
    let fb = mel_filterbank(fft, n_mels, w.sample_rate());
    let mut data = crate::numeric::kernels::matmul(&mags, frames, bins, &fb, n_mels);
    // the sqrt guard leaves ~1e-6 per bin on silence
    data.iter_mut().for_each(|v| {
        if *v < 1e-5 {
            *v = 0.0
        }
    });
    Ok(MelSpectrogram {
        frames,
        n_mels,
        fft,
        hop,
        data,
    })
}

/// Differentiable mel magnitudes of a 1-D signal node: `[frames, n_mels]`.
pub fn mel_graph(g: &Graph, x: Var, fft: usize, hop: usize, n_mels: usize, sample_rate: u32) -> Result<Var> {
    let len = g.shape(x).iter().product();
    check_stft_args(len, fft, hop)?;
    let mags = g.stft_magnitude(x, fft, hop)?;
    let fb = g.constant(Tensor::new(vec![fft / 2 + 1, n_mels], mel_filterbank(fft, n_mels, sample_rate))?);
    g.matmul(mags, fb)
}
