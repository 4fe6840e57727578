//! Spectral-flux onset detection, onset count accuracy and onset AP.

use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::numeric::kernels::{mel_filterbank, Stft};

/// Detected onset times (seconds, strictly ascending) with confidences in `[0, 1]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OnsetList {
    pub times: Vec<f32>,
    pub confidences: Vec<f32>,
}

impl OnsetList {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Builds a list from `(time, confidence)` pairs, sorting by time.
    pub fn from_pairs(mut pairs: Vec<(f32, f32)>) -> Self {
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        Self {
            times: pairs.iter().map(|p| p.0).collect(),
            confidences: pairs.iter().map(|p| p.1).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OnsetConfig {
    pub fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    /// Log compression `ln(1 + gain * mel)`.
    pub log_gain: f32,
    /// Half-width of the median window, in frames.
    pub median_frames: usize,
    pub median_offset: f32,
    pub floor: f32,
    /// Half-width of the local-maximum window, in frames.
    pub peak_frames: usize,
    pub min_gap: f32,
    /// A peak counts only if frame energy over the next few frames exceeds
    /// the energy `rise_lag` frames earlier by `rise_db`.
    pub rise_db: f32,
    pub rise_lag: usize,
}

impl Default for OnsetConfig {
    fn default() -> Self {
        Self {
            fft: 512,
            hop: 160,
            n_mels: 40,
            log_gain: 100.0,
            median_frames: 10,
            median_offset: 1.0,
            floor: 4.0,
            peak_frames: 3,
            min_gap: 0.05,
            rise_db: 6.0,
            rise_lag: 5,
        }
    }
}

/// Half-wave rectified log-mel flux per frame; frame `t` is centred at `t*hop`.
pub fn onset_strength(w: &Waveform, cfg: &OnsetConfig) -> Vec<f32> {
    strength_and_energy(w, cfg).0
}

/// Flux plus the spectral energy of each frame.
fn strength_and_energy(w: &Waveform, cfg: &OnsetConfig) -> (Vec<f32>, Vec<f32>) {
    let half = cfg.fft / 2;
    let mut padded = vec![0.0f32; w.len() + 2 * half];
    padded[half..half + w.len()].copy_from_slice(w.samples());
    let stft = Stft::new(cfg.fft, cfg.hop);
    let (mags, _) = stft.magnitude(&padded);
    let bins = stft.bins();
    let frames = mags.len() / bins;
    if frames == 0 {
        return (Vec::new(), Vec::new());
    }
    let energy: Vec<f32> = mags.chunks(bins).map(|f| f.iter().map(|m| m * m).sum()).collect();
    let fb = mel_filterbank(cfg.fft, cfg.n_mels, w.sample_rate());
    let mel = crate::numeric::kernels::matmul(&mags, frames, bins, &fb, cfg.n_mels);
    let logm: Vec<f32> = mel
        .iter()
        .map(|&m| {
            // drop the magnitude guard so digital silence stays flat
            let m = if m < 1e-5 { 0.0 } else { m };
            (1.0 + cfg.log_gain * m).ln()
        })
        .collect();
    let mut flux = vec![0.0f32; frames];
    for t in 1..frames {
        let (cur, prev) = (&logm[t * cfg.n_mels..(t + 1) * cfg.n_mels], &logm[(t - 1) * cfg.n_mels..t * cfg.n_mels]);
        flux[t] = cur.iter().zip(prev).map(|(a, b)| (a - b).max(0.0)).sum();
    }
    (flux, energy)
}

/// Energy rise in dB from `lag` frames before `t` to the loudest of the
/// three frames starting at `t`.
fn energy_rise(energy: &[f32], t: usize, lag: usize) -> f32 {
    let after = energy[t..(t + 3).min(energy.len())].iter().cloned().fold(0.0f32, f32::max);
    let before = energy[t.saturating_sub(lag)];
    10.0 * ((after + 1e-10) / (before + 1e-10)).log10()
}

fn median(xs: &mut [f32]) -> f32 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Peaks of the onset strength above an adaptive median threshold.
pub fn detect_onsets_with(w: &Waveform, cfg: &OnsetConfig) -> OnsetList {
    let (flux, energy) = strength_and_energy(w, cfg);
    let n = flux.len();
    let max = flux.iter().cloned().fold(0.0f32, f32::max);
    if max <= 0.0 {
        return OnsetList::default();
    }
    let sr = w.sample_rate() as f32;
    let mut picked: Vec<(usize, f32)> = Vec::new();
    for t in 0..n {
        let lo = t.saturating_sub(cfg.median_frames);
        let hi = (t + cfg.median_frames + 1).min(n);
        let thr = (median(&mut flux[lo..hi].to_vec()) + cfg.median_offset).max(cfg.floor);
        if flux[t] <= thr {
            continue;
        }
        let plo = t.saturating_sub(cfg.peak_frames);
        let phi = (t + cfg.peak_frames + 1).min(n);
        // first maximum in the window wins, so plateaus give one peak
        let is_peak = (plo..phi).all(|j| if j < t { flux[j] < flux[t] } else { flux[j] <= flux[t] });
        if !is_peak || energy_rise(&energy, t, cfg.rise_lag) < cfg.rise_db {
            continue;
        }
        let time = (t * cfg.hop) as f32 / sr;
        match picked.last_mut() {
            Some(last) if time - (last.0 * cfg.hop) as f32 / sr < cfg.min_gap => {
                if flux[t] > last.1 {
                    *last = (t, flux[t]);
                }
            }
            _ => picked.push((t, flux[t])),
        }
    }
    OnsetList {
        times: picked.iter().map(|&(t, _)| (t * cfg.hop) as f32 / sr).collect(),
        confidences: picked.iter().map(|&(_, f)| f / max).collect(),
    }
}

pub fn detect_onsets(w: &Waveform) -> OnsetList {
    detect_onsets_with(w, &OnsetConfig::default())
}

/// 1 when the detected count equals the reference count, per sample.
pub fn onset_count_match(gen: &OnsetList, reference: &[f32]) -> f64 {
    if gen.len() == reference.len() {
        1.0
    } else {
        0.0
    }
}

/// Mean of [`onset_count_match`] over paired samples.
pub fn onset_count_accuracy(gen: &[OnsetList], reference: &[Vec<f32>]) -> crate::Result<f64> {
    if gen.len() != reference.len() || gen.is_empty() {
        return Err(crate::Error::invalid("onset count accuracy needs equally many non-empty pairs"));
    }
    Ok(gen.iter().zip(reference).map(|(g, r)| onset_count_match(g, r)).sum::<f64>() / gen.len() as f64)
}

/// Confidence-ranked average precision with greedy nearest matching at
/// `tolerance` seconds: sum of precision at each true positive over the
/// number of references.
pub fn onset_ap_with(gen: &OnsetList, reference: &[f32], tolerance: f32) -> f64 {
    if reference.is_empty() {
        return if gen.is_empty() { 1.0 } else { 0.0 };
    }
    let mut order: Vec<usize> = (0..gen.len()).collect();
    order.sort_by(|&a, &b| gen.confidences[b].total_cmp(&gen.confidences[a]).then(a.cmp(&b)));
    let mut used = vec![false; reference.len()];
    let mut tp = 0usize;
    let mut ap = 0.0f64;
    for (rank, &i) in order.iter().enumerate() {
        let t = gen.times[i];
        let best = reference
            .iter()
            .enumerate()
            .filter(|(j, r)| !used[*j] && (t - **r).abs() <= tolerance + 1e-6)
            .min_by(|a, b| (t - a.1).abs().total_cmp(&(t - b.1).abs()));
        if let Some((j, _)) = best {
            used[j] = true;
            tp += 1;
            ap += tp as f64 / (rank + 1) as f64;
        }
    }
    ap / reference.len() as f64
}

pub fn onset_ap(gen: &OnsetList, reference: &[f32]) -> f64 {
    onset_ap_with(gen, reference, 0.1)
}
