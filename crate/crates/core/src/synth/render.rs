use std::f64::consts::PI;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Scene, SoundEvent, SoundKind};
use crate::audio::Waveform;
use crate::conditioning::video::{VideoFrames, FPS, FRAME_PIXELS, FRAME_SIDE};

const PEAK: f32 = 0.9;
const RAMP_SECONDS: f64 = 0.01;
const NOISE_TABLE: usize = 320;
const CHIRP_OCTAVE_SECONDS: f64 = 0.25;
const CHIRP_MAX_HZ: f64 = 4000.0;

fn noise_table() -> &'static [f32] {
    static TABLE: OnceLock<Vec<f32>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6e6f_6973_65);
        (0..NOISE_TABLE).map(|_| rng.gen_range(-1.0..1.0)).collect()
    })
}

/// Raised-cosine attack and release.
fn envelope(i: usize, len: usize, ramp: usize) -> f64 {
    let ramp = ramp.min(len / 2).max(1);
    let edge = |k: usize| 0.5 - 0.5 * (PI * k as f64 / ramp as f64).cos();
    if i < ramp {
        edge(i)
    } else if i >= len - ramp {
        edge(len - 1 - i)
    } else {
        1.0
    }
}

fn chirp_phase(f0: f64, t: f64) -> f64 {
    // f(t) = f0 * 2^(t / T) until it reaches the cap
    let k = std::f64::consts::LN_2 / CHIRP_OCTAVE_SECONDS;
    let t_cap = if f0 >= CHIRP_MAX_HZ { 0.0 } else { (CHIRP_MAX_HZ / f0).ln() / k };
    if t <= t_cap {
        2.0 * PI * f0 * ((k * t).exp() - 1.0) / k
    } else {
        2.0 * PI * (f0 * ((k * t_cap).exp() - 1.0) / k + CHIRP_MAX_HZ * (t - t_cap))
    }
}

fn event_sample(e: &SoundEvent, n_abs: usize, n_rel: usize, sr: f64) -> f64 {
    match e.kind {
        SoundKind::Tone => {
            let f = e.frequency.unwrap_or(440.0) as f64;
            (2.0 * PI * f * n_abs as f64 / sr).sin()
        }
        SoundKind::Chirp => chirp_phase(e.frequency.unwrap_or(300.0) as f64, n_rel as f64 / sr).sin(),
        SoundKind::NoiseBurst => noise_table()[n_abs % NOISE_TABLE] as f64,
        SoundKind::ClickTrain => {
            let period = (sr / e.frequency.unwrap_or(100.0) as f64).round().max(1.0) as usize;
            let k = n_abs % period;
            if k < 8 {
                (-(k as f64) / 2.0).exp()
            } else {
                0.0
            }
        }
    }
}

/// Additive synthesis of the scene, peak-normalized to 0.9.
pub fn render_audio(scene: &Scene, sample_rate: u32) -> Waveform {
    let sr = sample_rate as f64;
    let total = scene.samples(sample_rate);
    let mut out = vec![0.0f64; total];
    let ramp = (RAMP_SECONDS * sr).round() as usize;
    for e in &scene.events {
        let start = (e.onset as f64 * sr).round() as usize;
        let len = ((e.duration as f64 * sr).round() as usize).min(total.saturating_sub(start));
        for i in 0..len {
            let n = start + i;
            out[n] += e.amplitude as f64 * envelope(i, len, ramp) * event_sample(e, n, i, sr);
        }
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let gain = if peak > 0.0 { PEAK as f64 / peak } else { 0.0 };
    let samples = out.iter().map(|v| (v * gain) as f32).collect();
    Waveform::new(samples, sample_rate).expect("rendered audio is finite and non-empty")
}

pub fn kind_phrase(kind: SoundKind) -> &'static str {
    match kind {
        SoundKind::Tone => "a steady tone",
        SoundKind::Chirp => "a rising chirp",
        SoundKind::NoiseBurst => "a noise burst",
        SoundKind::ClickTrain => "a click train",
    }
}

/// `"<phrase> plays"` for one event, phrases joined by `" then "` otherwise.
pub fn render_caption(scene: &Scene) -> String {
    let phrases: Vec<&str> = scene.events.iter().map(|e| kind_phrase(e.kind)).collect();
    match phrases.len() {
        1 => format!("{} plays", phrases[0]),
        _ => phrases.join(" then "),
    }
}

/// Inverse of [`render_caption`]: the kind sequence, or `None` if the text
/// is not a template caption.
pub fn caption_kinds(caption: &str) -> Option<Vec<SoundKind>> {
    let body = caption.strip_suffix(" plays").unwrap_or(caption);
    let parts: Vec<&str> = body.split(" then ").collect();
    let single = caption.ends_with(" plays");
    if single != (parts.len() == 1) {
        return None;
    }
    parts
        .iter()
        .map(|p| SoundKind::ALL.iter().copied().find(|k| kind_phrase(*k) == *p))
        .collect()
}

/// Top-left corner of the flash block for each kind.
fn flash_corner(kind: SoundKind) -> (usize, usize) {
    match kind {
        SoundKind::Tone => (1, 1),
        SoundKind::Chirp => (1, 5),
        SoundKind::NoiseBurst => (5, 1),
        SoundKind::ClickTrain => (5, 5),
    }
}

/// Frame index holding the flash for an onset.
pub fn flash_frame(onset: f32) -> usize {
    // onsets sit on the 20 ms grid; go through integer cells to dodge rounding
    let cells = (onset / super::GRID).round() as usize;
    cells * FPS as usize / super::GRID_PER_SECOND
}

/// Black 8x8 frames at 10 fps with a 2x2 flash at each event onset.
pub fn render_video(scene: &Scene) -> VideoFrames {
    let count = (scene.length * FPS as f32).round() as usize;
    let mut v = VideoFrames::blank(FPS, count);
    for e in &scene.events {
        let f = flash_frame(e.onset);
        if f >= count {
            continue;
        }
        let (r0, c0) = flash_corner(e.kind);
        for r in r0..r0 + 2 {
            for c in c0..c0 + 2 {
                v.frames[f][r * FRAME_SIDE + c] = 1.0;
            }
        }
    }
    debug_assert!(v.frames.iter().all(|f| f.len() == FRAME_PIXELS));
    v
}
