//! Log-mel filterbank features.
//!
//! Frames are taken without padding, so a clip of `L` samples yields
//! `1 + (L - win_length) / hop` frames. Each frame is Hann-windowed, centred
//! in an `n_fft` buffer, transformed, and its magnitude spectrum is projected
//! on Slaney-scale triangular filters with area normalization. The result is
//! `ln(mel + log_floor)`.

use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex32;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub win_length: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            n_fft: 1024,
            hop: 160,
            win_length: 400,
            n_mels: 64,
            fmin: 60.0,
            fmax: 7800.0,
            log_floor: 1e-6,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.hop > self.win_length || self.win_length > self.n_fft {
            return Err(Error::config(format!(
                "need 0 < hop <= win_length <= n_fft, got hop={} win_length={} n_fft={}",
                self.hop, self.win_length, self.n_fft
            )));
        }
        if !(0.0 <= self.fmin
            && self.fmin < self.fmax
            && self.fmax <= self.sample_rate as f64 / 2.0)
        {
            return Err(Error::config(format!(
                "need 0 <= fmin < fmax <= sample_rate/2, got fmin={} fmax={}",
                self.fmin, self.fmax
            )));
        }
        if self.n_mels == 0 {
            return Err(Error::config("n_mels must be at least 1"));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::config("log_floor must be positive"));
        }
        Ok(())
    }

    pub fn n_frames(&self, n_samples: usize) -> Option<usize> {
        (n_samples >= self.win_length).then(|| 1 + (n_samples - self.win_length) / self.hop)
    }

    /// Value produced for silent input.
    pub fn silence_level(&self) -> f32 {
        self.log_floor.ln() as f32
    }
}

/// Log-mel features, shaped `n_mels x n_frames`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub values: Array2<f32>,
}

impl FeatureMap {
    pub fn n_mels(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.values.ncols()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    const MIN_LOG_MEL: f64 = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if hz >= MIN_LOG_HZ {
        MIN_LOG_MEL + (hz / MIN_LOG_HZ).ln() / logstep
    } else {
        hz / F_SP
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    const MIN_LOG_MEL: f64 = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if mel >= MIN_LOG_MEL {
        MIN_LOG_HZ * (logstep * (mel - MIN_LOG_MEL)).exp()
    } else {
        F_SP * mel
    }
}

/// One triangular filter, stored sparsely over FFT bins `start..start + weights.len()`.
#[derive(Debug, Clone)]
struct Filter {
    start: usize,
    weights: Vec<f32>,
}

/// Precomputed window, filterbank and FFT plan for one [`MelConfig`].
#[derive(Clone)]
pub struct MelFrontend {
    config: MelConfig,
    window: Vec<f32>,
    filters: Vec<Filter>,
    edges_hz: Vec<f64>,
    fft: Arc<dyn Fft<f32>>,
}

impl std::fmt::Debug for MelFrontend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelFrontend")
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl MelFrontend {
    pub fn new(config: MelConfig) -> Result<Self> {
        config.validate()?;
        // periodic Hann
        let window = (0..config.win_length)
            .map(|i| {
                let x = 2.0 * std::f64::consts::PI * i as f64 / config.win_length as f64;
                (0.5 - 0.5 * x.cos()) as f32
            })
            .collect();

        let lo = hz_to_mel(config.fmin);
        let hi = hz_to_mel(config.fmax);
        let edges_hz: Vec<f64> = (0..config.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (config.n_mels + 1) as f64))
            .collect();
        let n_bins = config.n_fft / 2 + 1;
        let bin_hz = config.sample_rate as f64 / config.n_fft as f64;
        let filters = (0..config.n_mels)
            .map(|m| {
                let (f0, f1, f2) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
                let norm = 2.0 / (f2 - f0);
                let dense: Vec<f64> = (0..n_bins)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        let lower = (f - f0) / (f1 - f0);
                        let upper = (f2 - f) / (f2 - f1);
                        lower.min(upper).max(0.0) * norm
                    })
                    .collect();
                let start = dense.iter().position(|w| *w > 0.0).unwrap_or(0);
                let end = dense
                    .iter()
                    .rposition(|w| *w > 0.0)
                    .map_or(start, |e| e + 1);
                Filter {
                    start,
                    weights: dense[start..end].iter().map(|w| *w as f32).collect(),
                }
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(config.n_fft);
        Ok(Self {
            config,
            window,
            filters,
            edges_hz,
            fft,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.config
    }

    /// Centre frequency of each mel filter in Hz.
    pub fn center_frequencies(&self) -> Vec<f64> {
        self.edges_hz[1..=self.config.n_mels].to_vec()
    }

    /// Dense `n_mels x (n_fft/2 + 1)` filterbank matrix.
    pub fn filterbank(&self) -> Array2<f32> {
        let mut fb = Array2::zeros((self.config.n_mels, self.config.n_fft / 2 + 1));
        for (m, f) in self.filters.iter().enumerate() {
            for (j, w) in f.weights.iter().enumerate() {
                fb[[m, f.start + j]] = *w;
            }
        }
        fb
    }

    /// Magnitude spectrogram, shaped `(n_fft/2 + 1) x n_frames`.
    pub fn magnitude(&self, waveform: &[f32]) -> Result<Array2<f32>> {
        let c = &self.config;
        let n_frames = c.n_frames(waveform.len()).ok_or_else(|| {
            Error::shape(format!(
                "clip of {} samples is shorter than the {}-sample analysis window",
                waveform.len(),
                c.win_length
            ))
        })?;
        let n_bins = c.n_fft / 2 + 1;
        let pad = (c.n_fft - c.win_length) / 2;
        let mut out = Array2::zeros((n_bins, n_frames));
        let mut buf = vec![Complex32::new(0.0, 0.0); c.n_fft];
        let mut scratch = vec![Complex32::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for t in 0..n_frames {
            buf.iter_mut().for_each(|v| *v = Complex32::new(0.0, 0.0));
            let frame = &waveform[t * c.hop..t * c.hop + c.win_length];
            for (i, (x, w)) in frame.iter().zip(&self.window).enumerate() {
                buf[pad + i] = Complex32::new(x * w, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for k in 0..n_bins {
                out[[k, t]] = buf[k].norm();
            }
        }
        Ok(out)
    }

    pub fn features(&self, waveform: &[f32]) -> Result<FeatureMap> {
        if waveform.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(
                "waveform passed to the mel frontend".into(),
            ));
        }
        let mag = self.magnitude(waveform)?;
        let n_frames = mag.ncols();
        let floor = self.config.log_floor;
        let mut values = Array2::zeros((self.config.n_mels, n_frames));
        for (m, f) in self.filters.iter().enumerate() {
            for t in 0..n_frames {
                let mut acc = 0.0f64;
                for (j, w) in f.weights.iter().enumerate() {
                    acc += (*w as f64) * mag[[f.start + j, t]] as f64;
                }
                values[[m, t]] = (acc + floor).ln() as f32;
            }
        }
        Ok(FeatureMap { values })
    }
}

/// One-shot convenience wrapper around [`MelFrontend::features`].
pub fn mel_features(waveform: &[f32], config: &MelConfig) -> Result<FeatureMap> {
    MelFrontend::new(config.clone())?.features(waveform)
}

/// Per-mel-bin mean and standard deviation, applied as `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl FeatureStats {
    pub fn estimate<'a>(maps: impl IntoIterator<Item = &'a FeatureMap>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for fm in maps {
            if sum.is_empty() {
                sum = vec![0.0; fm.n_mels()];
                sq = vec![0.0; fm.n_mels()];
            }
            if fm.n_mels() != sum.len() {
                return Err(Error::shape("feature maps with different mel counts"));
            }
            for (m, row) in fm.values.rows().into_iter().enumerate() {
                for v in row {
                    sum[m] += *v as f64;
                    sq[m] += (*v as f64) * (*v as f64);
                }
            }
            count += fm.n_frames();
        }
        if count == 0 {
            return Err(Error::Empty(
                "no frames to estimate feature statistics".into(),
            ));
        }
        let n = count as f64;
        let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
        let std = sum
            .iter()
            .zip(&sq)
            .map(|(s, q)| ((q / n - (s / n).powi(2)).max(0.0).sqrt().max(1e-3)) as f32)
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, fm: &mut FeatureMap) {
        for (m, mut row) in fm.values.rows_mut().into_iter().enumerate() {
            let (mu, sd) = (self.mean[m], self.std[m]);
            row.mapv_inplace(|v| (v - mu) / sd);
        }
    }
}
