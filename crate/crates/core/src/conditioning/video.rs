//! Grayscale frame sequences and frame-wise appearance + motion features.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numeric::Tensor;
use crate::{Error, Result};

pub const FRAME_SIDE: usize = 8;
pub const FRAME_PIXELS: usize = FRAME_SIDE * FRAME_SIDE;
pub const FEATURE_DIM: usize = 2 * FRAME_PIXELS;
pub const FPS: u32 = 10;

/// 8x8 grayscale frames in `[0, 1]`, row-major pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoFrames {
    pub fps: u32,
    pub frames: Vec<Vec<f32>>,
}

impl VideoFrames {
    pub fn new(fps: u32, frames: Vec<Vec<f32>>) -> Result<Self> {
        let v = Self { fps, frames };
        v.validate()?;
        Ok(v)
    }

    pub fn blank(fps: u32, count: usize) -> Self {
        Self {
            fps,
            frames: vec![vec![0.0; FRAME_PIXELS]; count],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fps == 0 {
            return Err(Error::invalid("fps must be positive"));
        }
        for (i, f) in self.frames.iter().enumerate() {
            if f.len() != FRAME_PIXELS {
                return Err(Error::shape("video frame", format!("frame {i} has {} pixels", f.len())));
            }
            if f.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::invalid(format!("frame {i} has pixels outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let v: Self = serde_json::from_str(s)?;
        v.validate()?;
        Ok(v)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// Per-frame `[raw pixels ++ difference from the previous frame]`, `[N_v, 128]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeatures {
    pub features: Tensor,
}

impl VideoFeatures {
    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn appearance(&self, i: usize) -> &[f32] {
        &self.features.row(i)[..FRAME_PIXELS]
    }

    pub fn motion(&self, i: usize) -> &[f32] {
        &self.features.row(i)[FRAME_PIXELS..]
    }
}

/// Frame differencing stands in for optical flow; the first frame is
/// differenced against black.
pub fn extract_video_features(v: &VideoFrames) -> Result<VideoFeatures> {
    v.validate()?;
    if v.len() < 2 {
        return Err(Error::invalid(format!("need at least 2 frames, got {}", v.len())));
    }
    let zero = vec![0.0f32; FRAME_PIXELS];
    let mut data = Vec::with_capacity(v.len() * FEATURE_DIM);
    for (i, f) in v.frames.iter().enumerate() {
        let prev = if i == 0 { &zero } else { &v.frames[i - 1] };
        data.extend_from_slice(f);
        data.extend(f.iter().zip(prev).map(|(a, b)| a - b));
    }
    Ok(VideoFeatures {
        features: Tensor::new(vec![v.len(), FEATURE_DIM], data)?,
    })
}
