//! Stub latent codec: frame averaging and repetition.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_FRAME: usize = 64;

/// A latent clip shaped `channels x length`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentClip {
    pub z: Array2<f32>,
}

impl LatentClip {
    pub fn new(z: Array2<f32>) -> Result<Self> {
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent value".into()));
        }
        Ok(Self { z })
    }

    pub fn channels(&self) -> usize {
        self.z.nrows()
    }

    pub fn len(&self) -> usize {
        self.z.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.z.ncols() == 0
    }
}

/// Encodes a waveform as `scale * mean(frame)` over frames of `frame` samples;
/// decoding repeats each value over its frame and divides by the scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StubCodec {
    pub frame: usize,
    pub latent_scale: f32,
}

impl Default for StubCodec {
    fn default() -> Self {
        Self {
            frame: DEFAULT_FRAME,
            latent_scale: 1.0,
        }
    }
}

impl StubCodec {
    pub fn latent_len(&self, n_samples: usize) -> usize {
        n_samples / self.frame
    }

    /// Trailing samples that do not fill a frame are dropped.
    pub fn encode(&self, waveform: &[f32]) -> Result<LatentClip> {
        let n = self.latent_len(waveform.len());
        if n == 0 {
            return Err(Error::shape(format!(
                "clip of {} samples is shorter than one {}-sample frame",
                waveform.len(),
                self.frame
            )));
        }
        let values: Vec<f32> = waveform
            .chunks_exact(self.frame)
            .map(|c| self.latent_scale * c.iter().sum::<f32>() / self.frame as f32)
            .collect();
        LatentClip::new(Array2::from_shape_vec((1, n), values).expect("1 x n"))
    }

    /// Mono waveform from the first latent channel.
    pub fn decode(&self, latent: &LatentClip) -> Vec<f32> {
        latent
            .z
            .row(0)
            .iter()
            .flat_map(|v| std::iter::repeat_n(v / self.latent_scale, self.frame))
            .collect()
    }
}
