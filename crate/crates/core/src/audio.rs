//! WAV decoding and encoding, channel down-mixing and band-limited resampling.

use std::f64::consts::PI;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Environment variable naming an optional directory for decoded-audio caching.
pub const CACHE_ENV: &str = "COCOLA_CACHE";

/// Interleaved-free decoded audio: one buffer per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedAudio {
    pub sample_rate: u32,
    pub channels: Vec<Vec<f32>>,
}

impl DecodedAudio {
    pub fn n_frames(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    /// Channel mean. A single channel is returned untouched.
    pub fn to_mono(&self) -> Vec<f32> {
        match self.channels.len() {
            0 => Vec::new(),
            1 => self.channels[0].clone(),
            n => {
                let scale = 1.0 / n as f32;
                (0..self.n_frames())
                    .map(|i| self.channels.iter().map(|c| c[i]).sum::<f32>() * scale)
                    .collect()
            }
        }
    }
}

fn decode_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Reads only the header, returning (sample_rate, channels, frames).
pub fn probe_wav(path: &Path) -> Result<(u32, u16, u32)> {
    let reader = WavReader::open(path).map_err(|e| decode_err(path, e))?;
    let spec = reader.spec();
    Ok((spec.sample_rate, spec.channels, reader.duration()))
}

/// Decodes PCM 8/16/24/32-bit integer or 32-bit float WAV into `[-1, 1]` floats.
pub fn read_wav(path: &Path) -> Result<DecodedAudio> {
    let mut reader = WavReader::open(path).map_err(|e| decode_err(path, e))?;
    let spec = reader.spec();
    let n_ch = spec.channels as usize;
    if n_ch == 0 {
        return Err(decode_err(path, "zero channels"));
    }
    let interleaved: Vec<f32> = match spec.sample_format {
        SampleFormat::Float => {
            if spec.bits_per_sample != 32 {
                return Err(decode_err(
                    path,
                    format!("unsupported float width {}", spec.bits_per_sample),
                ));
            }
            reader
                .samples::<f32>()
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| decode_err(path, e))?
        }
        SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| decode_err(path, e))?
        }
    };
    if !interleaved.len().is_multiple_of(n_ch) {
        return Err(decode_err(path, "truncated frame"));
    }
    if interleaved.iter().any(|v| !v.is_finite()) {
        return Err(decode_err(path, "non-finite sample"));
    }
    let frames = interleaved.len() / n_ch;
    let mut channels = vec![Vec::with_capacity(frames); n_ch];
    for frame in interleaved.chunks_exact(n_ch) {
        for (c, v) in frame.iter().enumerate() {
            channels[c].push(*v);
        }
    }
    Ok(DecodedAudio {
        sample_rate: spec.sample_rate,
        channels,
    })
}

/// Writes mono 16-bit PCM, clipping to `[-1, 1]`.
pub fn write_wav_i16(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut w = WavWriter::create(path, spec).map_err(|e| decode_err(path, e))?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v).map_err(|e| decode_err(path, e))?;
    }
    w.finalize().map_err(|e| decode_err(path, e))
}

/// Writes mono 32-bit float PCM without clipping.
pub fn write_wav_f32(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut w = WavWriter::create(path, spec).map_err(|e| decode_err(path, e))?;
    for &s in samples {
        w.write_sample(s).map_err(|e| decode_err(path, e))?;
    }
    w.finalize().map_err(|e| decode_err(path, e))
}

const SINC_ZERO_CROSSINGS: f64 = 24.0;

/// Windowed-sinc resampling. Equal rates return the input unchanged.
///
/// The output has `floor(n * to / from)` samples. When down-sampling the
/// kernel cutoff is lowered to the output Nyquist frequency.
pub fn resample(input: &[f32], from: u32, to: u32) -> Vec<f32> {
    if from == to || input.is_empty() {
        return input.to_vec();
    }
    let ratio = to as f64 / from as f64;
    let n_out = (input.len() as u128 * to as u128 / from as u128) as usize;
    let cutoff = ratio.min(1.0);
    let half_width = (SINC_ZERO_CROSSINGS / cutoff).ceil();
    let n_in = input.len() as i64;
    let step = from as f64 / to as f64;
    let mut out = Vec::with_capacity(n_out);
    for j in 0..n_out {
        let center = j as f64 * step;
        let lo = ((center - half_width).ceil() as i64).max(0);
        let hi = ((center + half_width).floor() as i64).min(n_in - 1);
        let mut acc = 0.0f64;
        for k in lo..=hi {
            let x = center - k as f64;
            let arg = cutoff * x;
            let sinc = if arg.abs() < 1e-12 {
                1.0
            } else {
                (PI * arg).sin() / (PI * arg)
            };
            // Blackman window over [-half_width, half_width]
            let u = (x / half_width + 1.0) * 0.5;
            let win = 0.42 - 0.5 * (2.0 * PI * u).cos() + 0.08 * (4.0 * PI * u).cos();
            acc += input[k as usize] as f64 * cutoff * sinc * win;
        }
        out.push(acc as f32);
    }
    out
}

fn cache_path(dir: &Path, path: &Path, target_rate: u32) -> Option<PathBuf> {
    let meta = fs::metadata(path).ok()?;
    let mtime = meta
        .modified()
        .ok()?
        .duration_since(std::time::UNIX_EPOCH)
        .ok()?
        .as_nanos();
    let canonical = fs::canonicalize(path).ok()?;
    let mut h = Sha256::new();
    h.update(canonical.to_string_lossy().as_bytes());
    h.update(meta.len().to_le_bytes());
    h.update(mtime.to_le_bytes());
    h.update(target_rate.to_le_bytes());
    let digest = h.finalize();
    let name: String = digest.iter().take(16).map(|b| format!("{b:02x}")).collect();
    Some(dir.join(format!("{name}.f32")))
}

fn read_cached(path: &Path) -> Option<Vec<f32>> {
    let mut bytes = Vec::new();
    fs::File::open(path).ok()?.read_to_end(&mut bytes).ok()?;
    if bytes.len() % 4 != 0 {
        return None;
    }
    Some(
        bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect(),
    )
}

fn write_cached(path: &Path, samples: &[f32]) {
    let tmp = path.with_extension("tmp");
    let written = fs::File::create(&tmp).and_then(|mut f| {
        let bytes: Vec<u8> = samples.iter().flat_map(|s| s.to_le_bytes()).collect();
        f.write_all(&bytes)
    });
    match written {
        Ok(()) => {
            if fs::rename(&tmp, path).is_err() {
                let _ = fs::remove_file(&tmp);
            }
        }
        Err(e) => {
            log::warn!("cannot write audio cache {}: {e}", tmp.display());
            let _ = fs::remove_file(&tmp);
        }
    }
}

/// Decodes a file to mono at `target_rate`, going through the
/// `COCOLA_CACHE` directory when that variable is set.
pub fn load_mono(path: &Path, target_rate: u32) -> Result<Vec<f32>> {
    let cache = std::env::var_os(CACHE_ENV)
        .map(PathBuf::from)
        .filter(|d| d.is_dir())
        .and_then(|d| cache_path(&d, path, target_rate));
    if let Some(cp) = &cache {
        if let Some(samples) = read_cached(cp) {
            return Ok(samples);
        }
    }
    let decoded = read_wav(path)?;
    let mono = resample(&decoded.to_mono(), decoded.sample_rate, target_rate);
    if let Some(cp) = &cache {
        write_cached(cp, &mono);
    }
    Ok(mono)
}
