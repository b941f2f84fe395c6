//! Multi-stem dataset ingestion.

mod manifest;
mod vocab;

pub use manifest::{
    assign_ratio_splits, scan_dataset, validate_manifest, DatasetManifest, EntryReport,
    EntryStatus, Layout, ManifestEntry, ScanOutcome, SkippedTrack, Split, SplitRule, StemRef,
    ValidationReport, FLAT_SEPARATOR, MANIFEST_VERSION,
};
pub use vocab::{normalize_tag, TagVocabulary};

use crate::audio;
use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Stem {
    pub tag: String,
    pub samples: Vec<f32>,
}

/// A track as a set of equal-length mono stems.
#[derive(Debug, Clone, PartialEq)]
pub struct StemTrack {
    pub track_id: String,
    pub sample_rate: u32,
    pub stems: Vec<Stem>,
}

impl StemTrack {
    /// Builds a track, checking non-emptiness, equal lengths and finiteness.
    pub fn new(track_id: impl Into<String>, sample_rate: u32, stems: Vec<Stem>) -> Result<Self> {
        let track_id = track_id.into();
        if stems.is_empty() {
            return Err(Error::Empty(format!("track `{track_id}` has no stems")));
        }
        let n = stems[0].samples.len();
        for s in &stems {
            if s.tag.is_empty() {
                return Err(Error::config(format!(
                    "track `{track_id}` has an empty tag"
                )));
            }
            if s.samples.len() != n {
                return Err(Error::shape(format!(
                    "track `{track_id}`: stem `{}` has {} samples, expected {n}",
                    s.tag,
                    s.samples.len()
                )));
            }
            if s.samples.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "track `{track_id}`, stem `{}`",
                    s.tag
                )));
            }
        }
        Ok(Self {
            track_id,
            sample_rate,
            stems,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.stems[0].samples.len()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Zero-pad every stem to at least this many samples.
    pub pad_to: Option<usize>,
}

/// Decodes all stems of an entry to mono at `target_rate` and trims them to
/// the shortest stem.
pub fn load_track(
    manifest: &DatasetManifest,
    entry: &ManifestEntry,
    target_rate: u32,
    opts: LoadOptions,
) -> Result<StemTrack> {
    let mut stems = Vec::with_capacity(entry.stems.len());
    for stem in &entry.stems {
        let path = manifest.stem_path(stem);
        let samples = audio::load_mono(&path, target_rate)?;
        if samples.is_empty() {
            return Err(Error::EmptyStem { path });
        }
        stems.push(Stem {
            tag: stem.tag.clone(),
            samples,
        });
    }
    let min_len = stems.iter().map(|s| s.samples.len()).min().unwrap_or(0);
    let target_len = opts.pad_to.map_or(min_len, |p| p.max(min_len));
    for s in &mut stems {
        s.samples.resize(target_len, 0.0);
    }
    StemTrack::new(entry.track_id.clone(), target_rate, stems)
}

/// Loads every track of one split at the manifest's sample rate, in manifest order.
pub fn load_split(manifest: &DatasetManifest, split: Split) -> Result<Vec<StemTrack>> {
    manifest
        .split(split)
        .map(|e| load_track(manifest, e, manifest.sample_rate, LoadOptions::default()))
        .collect()
}
