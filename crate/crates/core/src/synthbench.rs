//! Synthetic multi-stem tracks whose stems share a key and a tempo.
//!
//! Each track draws one root and one tempo. Its stems are distinct voices
//! locked to that pair: a triad arpeggio, a root/fifth drone pulsing on the
//! beat, pitched percussion, and a scale melody an octave up. Every voice is
//! pitched and beat-aligned, so any sub-mix carries both the key and the
//! rhythmic grid of its track.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use log::{info, warn};
use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::write_wav_i16;
use crate::dataset::{
    assign_ratio_splits, DatasetManifest, ManifestEntry, Split, Stem, StemRef, StemTrack,
};
use crate::error::{Error, Result};
use crate::sampling::Rng;

pub const VOICES: [&str; 4] = ["arp", "drone", "perc", "melody"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_tracks: usize,
    pub stems_per_track: usize,
    /// Seconds.
    pub duration: f64,
    pub sample_rate: u32,
    /// Root frequencies in Hz.
    pub key_set: Vec<f64>,
    /// Beats per minute.
    pub tempo_set: Vec<f64>,
    pub seed: u64,
    /// Train, validation and test fractions.
    pub split_ratios: [f64; 3],
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_tracks: 250,
            stems_per_track: 4,
            duration: 6.0,
            sample_rate: 16_000,
            // twelve chromatic roots from A3
            key_set: (0..12)
                .map(|i| 220.0 * 2f64.powf(i as f64 / 12.0))
                .collect(),
            tempo_set: vec![70.0, 85.0, 100.0, 115.0, 130.0, 145.0],
            seed: 0,
            split_ratios: [0.8, 0.1, 0.1],
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_tracks < 2 {
            return Err(Error::config("n_tracks must be at least 2"));
        }
        if self.stems_per_track < 2 {
            return Err(Error::config("stems_per_track must be at least 2"));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) || self.sample_rate == 0 {
            return Err(Error::config("duration and sample_rate must be positive"));
        }
        if self.key_set.is_empty() || self.tempo_set.is_empty() {
            return Err(Error::config("key_set and tempo_set must be non-empty"));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if self
            .key_set
            .iter()
            .any(|k| !(*k > 0.0 && 2.0 * k < nyquist))
        {
            return Err(Error::config(
                "every root must be positive and well below the Nyquist rate",
            ));
        }
        if self.tempo_set.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(Error::config("every tempo must be positive"));
        }
        if self.split_ratios.iter().any(|r| !(*r >= 0.0))
            || self.split_ratios.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::config(
                "split ratios must be non-negative with a positive sum",
            ));
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        (self.duration * self.sample_rate as f64).round() as usize
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn voice_tag(stem: usize) -> String {
    let base = VOICES[stem % VOICES.len()];
    match stem / VOICES.len() {
        0 => base.to_string(),
        n => format!("{base}{}", n + 1),
    }
}

pub fn track_id(index: usize) -> String {
    format!("track_{index:04}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackMeta {
    pub track_id: String,
    pub key_index: usize,
    pub root_hz: f64,
    pub tempo_bpm: f64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChromaCheck {
    pub intra_mean: f64,
    pub inter_mean: f64,
    pub intra_pairs: usize,
    pub inter_pairs: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthMeta {
    pub spec: SynthSpec,
    pub tracks: Vec<TrackMeta>,
    /// Groups of track ids sharing both key and tempo.
    pub collisions: Vec<Vec<String>>,
    pub chroma_check: ChromaCheck,
}

impl SynthMeta {
    /// Whether two tracks share key and tempo.
    pub fn collide(&self, a: &str, b: &str) -> bool {
        let find = |id: &str| self.tracks.iter().find(|t| t.track_id == id);
        match (find(a), find(b)) {
            (Some(x), Some(y)) => x.key_index == y.key_index && x.tempo_bpm == y.tempo_bpm,
            _ => false,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn track_rng(seed: u64, index: usize) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Draws the (key index, tempo) pair of track `index`.
pub fn track_key_tempo(spec: &SynthSpec, index: usize) -> (usize, f64) {
    let mut rng = track_rng(spec.seed, index);
    let k = rng.random_range(0..spec.key_set.len());
    let t = spec.tempo_set[rng.random_range(0..spec.tempo_set.len())];
    (k, t)
}

fn semitone(root: f64, steps: i32) -> f64 {
    root * 2f64.powf(steps as f64 / 12.0)
}

/// Band-limited sawtooth-like tone with `1/h` harmonic amplitudes.
fn tone(freq: f64, t: f64, nyquist: f64) -> f64 {
    let mut v = 0.0;
    for h in 1..=6 {
        let f = freq * h as f64;
        if f >= nyquist * 0.9 {
            break;
        }
        v += (2.0 * PI * f * t).sin() / h as f64;
    }
    v
}

fn normalize_peak(x: &mut [f32], peak: f32) {
    let m = x.iter().fold(0.0f32, |a, v| a.max(v.abs()));
    if m > 0.0 {
        for v in x.iter_mut() {
            *v *= peak / m;
        }
    }
}

struct Voicing {
    root: f64,
    beat: f64,
    phase: f64,
    sr: f64,
    n: usize,
}

impl Voicing {
    fn nyquist(&self) -> f64 {
        self.sr / 2.0
    }

    /// Index and in-event time of the event grid with period `period`.
    fn event(&self, i: usize, period: f64) -> (i64, f64) {
        let t = i as f64 / self.sr - self.phase;
        let k = (t / period).floor();
        (k as i64, t - k * period)
    }

    fn arp(&self, rng: &mut Rng) -> Vec<f32> {
        let mut pattern = [0, 4, 7, 12];
        if rng.random_bool(0.5) {
            pattern.reverse();
        }
        let period = self.beat / 2.0;
        (0..self.n)
            .map(|i| {
                let (k, dt) = self.event(i, period);
                let f = semitone(self.root, pattern[k.rem_euclid(4) as usize]);
                let env = (dt / 0.005).min(1.0) * (-dt / 0.12).exp();
                (env * tone(f, i as f64 / self.sr, self.nyquist())) as f32
            })
            .collect()
    }

    fn drone(&self) -> Vec<f32> {
        (0..self.n)
            .map(|i| {
                let t = i as f64 / self.sr;
                let (_, dt) = self.event(i, self.beat);
                let pulse = 0.4 + 0.6 * (-dt / (0.3 * self.beat)).exp();
                let v = tone(self.root / 2.0, t, self.nyquist())
                    + 0.7 * tone(semitone(self.root, 7) / 2.0, t, self.nyquist());
                (pulse * v) as f32
            })
            .collect()
    }

    fn perc(&self, rng: &mut Rng) -> Vec<f32> {
        let noise = Normal::new(0.0, 1.0).expect("unit normal");
        let hit = semitone(self.root, 12);
        (0..self.n)
            .map(|i| {
                let t = i as f64 / self.sr;
                let (k, dt) = self.event(i, self.beat / 2.0);
                let accent = if k.rem_euclid(2) == 0 { 1.0 } else { 0.45 };
                let burst = 0.35 * noise.sample(rng) * (-dt / 0.015).exp();
                let body = (2.0 * PI * hit * t).sin() * (-dt / 0.09).exp();
                (accent * (burst + body)) as f32
            })
            .collect()
    }

    fn melody(&self, rng: &mut Rng) -> Vec<f32> {
        const SCALE: [i32; 7] = [0, 2, 4, 5, 7, 9, 11];
        let n_beats = (self.n as f64 / self.sr / self.beat).ceil() as usize + 2;
        let notes: Vec<i32> = (0..n_beats)
            .map(|_| SCALE[rng.random_range(0..SCALE.len())] + 12)
            .collect();
        (0..self.n)
            .map(|i| {
                let (k, dt) = self.event(i, self.beat);
                let note = notes[(k + 1).clamp(0, n_beats as i64 - 1) as usize];
                let env = (dt / 0.01).min(1.0) * (0.35 + 0.65 * (-dt / 0.25).exp());
                (env * tone(
                    semitone(self.root, note),
                    i as f64 / self.sr,
                    self.nyquist(),
                )) as f32
            })
            .collect()
    }
}

/// Renders track `index` of `spec` in memory.
pub fn render_track(spec: &SynthSpec, index: usize) -> Result<StemTrack> {
    let (key_index, tempo) = track_key_tempo(spec, index);
    let mut rng = track_rng(spec.seed, index);
    // skip the key/tempo draws
    let _ = (
        rng.random_range(0..spec.key_set.len()),
        rng.random_range(0..spec.tempo_set.len()),
    );
    let beat = 60.0 / tempo;
    let v = Voicing {
        root: spec.key_set[key_index],
        beat,
        phase: rng.random_range(0.0..beat),
        sr: spec.sample_rate as f64,
        n: spec.n_samples(),
    };
    let mut stems = Vec::with_capacity(spec.stems_per_track);
    for s in 0..spec.stems_per_track {
        let mut samples = match s % VOICES.len() {
            0 => v.arp(&mut rng),
            1 => v.drone(),
            2 => v.perc(&mut rng),
            _ => v.melody(&mut rng),
        };
        let gain = rng.random_range(0.12f32..0.24);
        normalize_peak(&mut samples, gain);
        stems.push(Stem {
            tag: voice_tag(s),
            samples,
        });
    }
    StemTrack::new(track_id(index), spec.sample_rate, stems)
}

/// 12-bin pitch-class energy profile from the first second of `x`.
pub fn chroma_profile(x: &[f32], sample_rate: u32) -> [f64; 12] {
    let n = x.len().min(sample_rate as usize);
    let mut chroma = [0.0; 12];
    for step in 0..48 {
        let f = 110.0 * 2f64.powf(step as f64 / 12.0);
        if f >= sample_rate as f64 / 2.0 {
            break;
        }
        // Goertzel power at f
        let w = 2.0 * PI * f / sample_rate as f64;
        let coeff = 2.0 * w.cos();
        let (mut s1, mut s2) = (0.0, 0.0);
        for v in &x[..n] {
            let s0 = *v as f64 + coeff * s1 - s2;
            s2 = s1;
            s1 = s0;
        }
        chroma[step % 12] += s1 * s1 + s2 * s2 - coeff * s1 * s2;
    }
    chroma
}

fn pearson(a: &[f64; 12], b: &[f64; 12]) -> f64 {
    let ma = a.iter().sum::<f64>() / 12.0;
    let mb = b.iter().sum::<f64>() / 12.0;
    let (mut num, mut va, mut vb) = (0.0, 0.0, 0.0);
    for i in 0..12 {
        num += (a[i] - ma) * (b[i] - mb);
        va += (a[i] - ma).powi(2);
        vb += (b[i] - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        num / (va * vb).sqrt()
    }
}

/// Mean chroma correlation of stem pairs within tracks vs across
/// non-colliding tracks, on up to 40 tracks.
pub fn chroma_check(tracks: &[StemTrack], keys: &[(usize, f64)], sample_rate: u32) -> ChromaCheck {
    let n = tracks.len().min(40);
    let profiles: Vec<Vec<[f64; 12]>> = tracks[..n]
        .iter()
        .map(|t| {
            t.stems
                .iter()
                .map(|s| chroma_profile(&s.samples, sample_rate))
                .collect()
        })
        .collect();
    let (mut intra, mut inter) = (Vec::new(), Vec::new());
    for (i, p) in profiles.iter().enumerate() {
        for a in 0..p.len() {
            for b in a + 1..p.len() {
                intra.push(pearson(&p[a], &p[b]));
            }
        }
        let j = (i + 1) % n;
        if j != i && keys[i] != keys[j] {
            for a in 0..p.len() {
                for b in 0..profiles[j].len() {
                    if a != b {
                        inter.push(pearson(&p[a], &profiles[j][b]));
                    }
                }
            }
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let (intra_mean, inter_mean) = (mean(&intra), mean(&inter));
    ChromaCheck {
        intra_mean,
        inter_mean,
        intra_pairs: intra.len(),
        inter_pairs: inter.len(),
        passed: intra_mean > inter_mean,
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutcome {
    pub manifest: DatasetManifest,
    pub meta: SynthMeta,
}

/// Writes `tracks/<id>/<voice>.wav`, `manifest.json` and `synth_meta.json` under `out_dir`.
pub fn generate(spec: &SynthSpec, out_dir: &Path) -> Result<SynthOutcome> {
    spec.validate()?;
    let ids: Vec<String> = (0..spec.n_tracks).map(track_id).collect();
    let splits = assign_ratio_splits(&ids, spec.split_ratios, spec.seed);
    let keys: Vec<(usize, f64)> = (0..spec.n_tracks)
        .map(|i| track_key_tempo(spec, i))
        .collect();

    let mut entries = Vec::with_capacity(spec.n_tracks);
    let mut check_tracks = Vec::new();
    for (i, id) in ids.iter().enumerate() {
        let track = render_track(spec, i)?;
        let dir = out_dir.join("tracks").join(id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut stems = Vec::new();
        for stem in &track.stems {
            let rel = format!("tracks/{id}/{}.wav", stem.tag);
            write_wav_i16(&out_dir.join(&rel), &stem.samples, spec.sample_rate)?;
            stems.push(StemRef {
                tag: stem.tag.clone(),
                path: rel,
            });
        }
        entries.push(ManifestEntry {
            track_id: id.clone(),
            split: splits[i],
            stems,
        });
        if check_tracks.len() < 40 {
            check_tracks.push(track);
        }
    }

    let mut groups: BTreeMap<(usize, u64), Vec<String>> = BTreeMap::new();
    for (i, (k, t)) in keys.iter().enumerate() {
        groups
            .entry((*k, t.to_bits()))
            .or_default()
            .push(ids[i].clone());
    }
    let collisions: Vec<Vec<String>> = groups.into_values().filter(|g| g.len() > 1).collect();
    let chroma = chroma_check(&check_tracks, &keys, spec.sample_rate);
    if !chroma.passed {
        warn!(
            "chroma sanity check failed: intra-track {:.3} <= inter-track {:.3}",
            chroma.intra_mean, chroma.inter_mean
        );
    }
    let meta = SynthMeta {
        spec: spec.clone(),
        tracks: keys
            .iter()
            .enumerate()
            .map(|(i, (k, t))| TrackMeta {
                track_id: ids[i].clone(),
                key_index: *k,
                root_hz: spec.key_set[*k],
                tempo_bpm: *t,
                split: splits[i],
            })
            .collect(),
        collisions,
        chroma_check: chroma,
    };

    let manifest = DatasetManifest::new(".", spec.sample_rate, entries)?;
    manifest.save(&out_dir.join("manifest.json"))?;
    let meta_path = out_dir.join("synth_meta.json");
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)? + "\n")
        .map_err(|e| Error::io(&meta_path, e))?;
    info!(
        "wrote {} tracks, {} collision groups, chroma intra {:.3} / inter {:.3}",
        spec.n_tracks,
        meta.collisions.len(),
        meta.chroma_check.intra_mean,
        meta.chroma_check.inter_mean
    );
    let mut manifest = manifest;
    manifest.root = out_dir.to_path_buf();
    Ok(SynthOutcome { manifest, meta })
}
