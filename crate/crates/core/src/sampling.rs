//! Batch construction: overlap-constrained window slicing, disjoint stem
//! subsets, sub-mixing and additive Gaussian noise.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng as _;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Stem, StemTrack};
use crate::error::{Error, Result};

/// Seeded generator used across the crate.
pub type Rng = ChaCha8Rng;

/// Attempts per batch slot before giving up on a track draw.
pub const MAX_SLOT_ATTEMPTS: usize = 100;

/// Stems whose window RMS is below this are treated as silent.
pub const DEFAULT_SILENCE_RMS: f32 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetMode {
    SingleStem,
    RandomSubmix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Window length in samples.
    pub window_len: usize,
    /// Maximum overlap between two windows of one track, as a fraction of the window.
    pub max_overlap: f64,
    /// Windows per batch.
    pub batch_size: usize,
    pub subset_mode: SubsetMode,
    pub noise_sigma: f64,
    pub seed: u64,
    pub silence_rms: f32,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            window_len: 80_000,
            max_overlap: 0.5,
            batch_size: 32,
            subset_mode: SubsetMode::RandomSubmix,
            noise_sigma: 1e-3,
            seed: 0,
            silence_rms: DEFAULT_SILENCE_RMS,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 {
            return Err(Error::config("window_len must be positive"));
        }
        if !(0.0..1.0).contains(&self.max_overlap) {
            return Err(Error::config(format!(
                "max_overlap must be in [0, 1), got {}",
                self.max_overlap
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    /// Minimum distance between two window offsets of one track.
    pub fn min_offset_gap(&self) -> usize {
        let allowed = (self.max_overlap * self.window_len as f64).floor() as usize;
        self.window_len - allowed.min(self.window_len)
    }
}

/// An L-sample slice of all stems of a track.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub track_id: String,
    /// Index into the track pool the window was cut from.
    pub track_index: usize,
    pub offset: usize,
    pub stems: Vec<Stem>,
}

impl Window {
    pub fn len(&self) -> usize {
        self.stems.first().map_or(0, |s| s.samples.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cut(track: &StemTrack, track_index: usize, offset: usize, len: usize) -> Result<Self> {
        if offset + len > track.n_samples() {
            return Err(Error::shape(format!(
                "window [{offset}, {}) exceeds track `{}` of {} samples",
                offset + len,
                track.track_id,
                track.n_samples()
            )));
        }
        Ok(Self {
            track_id: track.track_id.clone(),
            track_index,
            offset,
            stems: track
                .stems
                .iter()
                .map(|s| Stem {
                    tag: s.tag.clone(),
                    samples: s.samples[offset..offset + len].to_vec(),
                })
                .collect(),
        })
    }

    /// Indices of stems whose RMS reaches `threshold`.
    pub fn active_stems(&self, threshold: f32) -> Vec<usize> {
        self.stems
            .iter()
            .enumerate()
            .filter(|(_, s)| rms(&s.samples) >= threshold)
            .map(|(i, _)| i)
            .collect()
    }
}

pub fn rms(x: &[f32]) -> f32 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>() / x.len() as f64).sqrt() as f32
}

/// Length of the intersection of `[a, a+len)` and `[b, b+len)`.
pub fn overlap(a: usize, b: usize, len: usize) -> usize {
    len.saturating_sub(a.abs_diff(b))
}

/// Two disjoint sub-mixes of one window: the positive pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SubMixPair {
    pub track_id: String,
    pub offset: usize,
    pub subset_1: Vec<usize>,
    pub subset_2: Vec<usize>,
    pub mix_1: Vec<f32>,
    pub mix_2: Vec<f32>,
}

impl SubMixPair {
    pub fn window_ref(&self) -> (&str, usize) {
        (&self.track_id, self.offset)
    }
}

fn eligible_tracks(tracks: &[StemTrack], len: usize) -> Result<Vec<usize>> {
    let eligible: Vec<usize> = (0..tracks.len())
        .filter(|&i| tracks[i].n_samples() >= len)
        .collect();
    if eligible.is_empty() {
        return Err(Error::NoEligibleTrack {
            pool: tracks.len(),
            min_len: len,
        });
    }
    Ok(eligible)
}

/// Whether `count` windows fit in a track with pairwise offset gaps of at least `gap`.
fn fits(n_samples: usize, len: usize, gap: usize, count: usize) -> bool {
    n_samples >= len && (n_samples - len) >= gap.saturating_mul(count.saturating_sub(1))
}

/// Uniform draw of `count` offsets in `[0, max_offset]` with pairwise
/// distance at least `gap`, returned in random order.
fn spaced_offsets(max_offset: usize, gap: usize, count: usize, rng: &mut Rng) -> Vec<usize> {
    let span = max_offset - gap * (count - 1);
    // stars and bars: distinct sorted picks in [0, span + count) map onto
    // non-decreasing picks in [0, span]
    let mut picks = index::sample(rng, span + count, count).into_vec();
    picks.sort_unstable();
    let mut offsets: Vec<usize> = picks
        .iter()
        .enumerate()
        .map(|(i, u)| u - i + i * gap)
        .collect();
    for i in (1..offsets.len()).rev() {
        let j = rng.random_range(0..=i);
        offsets.swap(i, j);
    }
    offsets
}

/// Samples `batch_size` windows: tracks uniformly with replacement, offsets
/// uniformly among those keeping every same-track pair within the overlap bound.
pub fn sample_windows(
    tracks: &[StemTrack],
    config: &SamplerConfig,
    rng: &mut Rng,
) -> Result<Vec<Window>> {
    config.validate()?;
    let len = config.window_len;
    let gap = config.min_offset_gap();
    let eligible = eligible_tracks(tracks, len)?;

    let mut assignment = Vec::with_capacity(config.batch_size);
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for _ in 0..config.batch_size {
        let mut chosen = None;
        let mut last = eligible[0];
        for _ in 0..MAX_SLOT_ATTEMPTS {
            let t = eligible[rng.random_range(0..eligible.len())];
            last = t;
            let c = counts.get(&t).copied().unwrap_or(0) + 1;
            if fits(tracks[t].n_samples(), len, gap, c) {
                chosen = Some(t);
                break;
            }
        }
        let t = chosen.ok_or_else(|| Error::OverlapInfeasible {
            track_id: tracks[last].track_id.clone(),
        })?;
        *counts.entry(t).or_default() += 1;
        assignment.push(t);
    }

    let mut offsets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (&t, &c) in &counts {
        offsets.insert(t, spaced_offsets(tracks[t].n_samples() - len, gap, c, rng));
    }
    assignment
        .iter()
        .map(|&t| {
            let offset = offsets.get_mut(&t).unwrap().pop().unwrap();
            Window::cut(&tracks[t], t, offset, len)
        })
        .collect()
}

/// Offsets in `[0, max_offset]` at distance `>= gap` from every taken
/// offset, as inclusive intervals.
fn free_intervals(max_offset: usize, gap: usize, taken: &[usize]) -> Vec<(usize, usize)> {
    let mut blocked: Vec<(usize, usize)> = taken
        .iter()
        .filter(|_| gap > 0)
        .map(|&a| (a.saturating_sub(gap - 1), a + gap - 1))
        .collect();
    blocked.sort_unstable();
    let mut free = Vec::new();
    let mut cursor = 0usize;
    for (lo, hi) in blocked {
        if lo > cursor {
            free.push((cursor, (lo - 1).min(max_offset)));
        }
        cursor = cursor.max(hi + 1);
        if cursor > max_offset {
            break;
        }
    }
    if cursor <= max_offset {
        free.push((cursor, max_offset));
    }
    free.retain(|(lo, hi)| lo <= hi);
    free
}

/// Like [`sample_windows`], then redraws any window with fewer than
/// `min_active` non-silent stems, keeping the overlap constraint.
pub fn sample_batch(
    tracks: &[StemTrack],
    config: &SamplerConfig,
    min_active: usize,
    rng: &mut Rng,
) -> Result<Vec<Window>> {
    let mut windows = sample_windows(tracks, config, rng)?;
    let eligible = eligible_tracks(tracks, config.window_len)?;
    let gap = config.min_offset_gap();
    for slot in 0..windows.len() {
        if windows[slot].active_stems(config.silence_rms).len() >= min_active {
            continue;
        }
        let mut replaced = false;
        for _ in 0..MAX_SLOT_ATTEMPTS {
            let t = eligible[rng.random_range(0..eligible.len())];
            let taken: Vec<usize> = windows
                .iter()
                .enumerate()
                .filter(|(i, w)| *i != slot && w.track_index == t)
                .map(|(_, w)| w.offset)
                .collect();
            let free = free_intervals(tracks[t].n_samples() - config.window_len, gap, &taken);
            let total: usize = free.iter().map(|(lo, hi)| hi - lo + 1).sum();
            if total == 0 {
                continue;
            }
            let mut pick = rng.random_range(0..total);
            let mut offset = 0;
            for (lo, hi) in &free {
                let size = hi - lo + 1;
                if pick < size {
                    offset = lo + pick;
                    break;
                }
                pick -= size;
            }
            let w = Window::cut(&tracks[t], t, offset, config.window_len)?;
            if w.active_stems(config.silence_rms).len() >= min_active {
                windows[slot] = w;
                replaced = true;
                break;
            }
        }
        if !replaced {
            return Err(Error::TooFewStems {
                track_id: windows[slot].track_id.clone(),
                active: windows[slot].active_stems(config.silence_rms).len(),
            });
        }
    }
    Ok(windows)
}

/// Draws two disjoint non-empty subsets of `candidates`.
///
/// `SingleStem` picks two distinct singletons; `RandomSubmix` is uniform over
/// all ordered pairs of disjoint non-empty subsets.
pub fn draw_disjoint_pair(
    candidates: &[usize],
    mode: SubsetMode,
    rng: &mut Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = candidates.len();
    if n < 2 {
        return Err(Error::TooFewStems {
            track_id: String::new(),
            active: n,
        });
    }
    match mode {
        SubsetMode::SingleStem => {
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            Ok((vec![candidates[i]], vec![candidates[j]]))
        }
        SubsetMode::RandomSubmix => loop {
            // each stem goes to subset 1, subset 2 or neither; reject empties
            let mut a = Vec::new();
            let mut b = Vec::new();
            for &c in candidates {
                match rng.random_range(0..3u8) {
                    0 => a.push(c),
                    1 => b.push(c),
                    _ => {}
                }
            }
            if !a.is_empty() && !b.is_empty() {
                return Ok((a, b));
            }
        },
    }
}

/// Disjoint stem subsets over the window's non-silent stems.
pub fn select_disjoint_subsets(
    window: &Window,
    mode: SubsetMode,
    silence_rms: f32,
    rng: &mut Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let active = window.active_stems(silence_rms);
    draw_disjoint_pair(&active, mode, rng).map_err(|e| match e {
        Error::TooFewStems { active, .. } => Error::TooFewStems {
            track_id: window.track_id.clone(),
            active,
        },
        other => other,
    })
}

/// Elementwise sum, without normalization or clipping.
pub fn mix(stems: &[&[f32]]) -> Result<Vec<f32>> {
    let first = stems
        .first()
        .ok_or_else(|| Error::Empty("mix of zero stems".into()))?;
    let len = first.len();
    let mut out = vec![0.0f32; len];
    for s in stems {
        if s.len() != len {
            return Err(Error::shape(format!(
                "mix: stem of {} samples, expected {len}",
                s.len()
            )));
        }
        for (o, v) in out.iter_mut().zip(s.iter()) {
            *o += v;
        }
    }
    Ok(out)
}

/// Sums the stems of `window` selected by `subset`.
pub fn mix_subset(window: &Window, subset: &[usize]) -> Result<Vec<f32>> {
    let parts: Vec<&[f32]> = subset
        .iter()
        .map(|&i| {
            window
                .stems
                .get(i)
                .map(|s| s.samples.as_slice())
                .ok_or_else(|| Error::shape(format!("stem index {i} out of range")))
        })
        .collect::<Result<_>>()?;
    mix(&parts)
}

/// Adds i.i.d. Gaussian noise of standard deviation `sigma`.
pub fn augment(waveform: &[f32], sigma: f64, rng: &mut Rng) -> Vec<f32> {
    if sigma == 0.0 {
        return waveform.to_vec();
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated as finite and non-negative");
    waveform
        .iter()
        .map(|&x| x + normal.sample(rng) as f32)
        .collect()
}

/// Subset selection and mixing for one window, without augmentation.
pub fn make_pair(
    window: &Window,
    mode: SubsetMode,
    silence_rms: f32,
    rng: &mut Rng,
) -> Result<SubMixPair> {
    let (subset_1, subset_2) = select_disjoint_subsets(window, mode, silence_rms, rng)?;
    Ok(SubMixPair {
        track_id: window.track_id.clone(),
        offset: window.offset,
        mix_1: mix_subset(window, &subset_1)?,
        mix_2: mix_subset(window, &subset_2)?,
        subset_1,
        subset_2,
    })
}
