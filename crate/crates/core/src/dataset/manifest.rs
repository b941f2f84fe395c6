//! Dataset manifests: discovery of multi-stem tracks on disk, split
//! assignment, persistence and validation.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use super::vocab::{normalize_tag, TagVocabulary};
use crate::audio;
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

/// Files with this stem name hold the full mix and are never treated as stems.
const MIXTURE_NAMES: &[&str] = &["mixture", "mix"];

/// Separator between track id and tag in the `flat_stems` layout.
pub const FLAT_SEPARATOR: &str = "__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    fn from_dir_name(name: &str) -> Option<Split> {
        match name.to_lowercase().as_str() {
            "train" => Some(Split::Train),
            "validation" | "valid" | "val" => Some(Split::Validation),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::from_dir_name(s).ok_or_else(|| Error::config(format!("unknown split `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// `root/[split/]<track_id>__<tag>.wav`
    FlatStems,
    /// `root/[split/]<track_id>/**/<tag>.wav`
    PerTrackDirs,
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat_stems" => Ok(Layout::FlatStems),
            "per_track_dirs" => Ok(Layout::PerTrackDirs),
            other => Err(Error::config(format!("unknown layout `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitRule {
    /// Splits come from `train/`, `validation/` and `test/` directories under the root.
    Explicit,
    /// Tracks are ranked by a seeded hash of their id and cut by ratio.
    Ratio {
        train: f64,
        validation: f64,
        test: f64,
        seed: u64,
    },
}

impl SplitRule {
    pub fn ratio(train: f64, validation: f64, test: f64, seed: u64) -> Result<Self> {
        let parts = [train, validation, test];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) || parts.iter().sum::<f64>() <= 0.0 {
            return Err(Error::config(format!(
                "split ratios must be non-negative with a positive sum, got {parts:?}"
            )));
        }
        Ok(SplitRule::Ratio {
            train,
            validation,
            test,
            seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemRef {
    pub tag: String,
    /// Relative to the manifest root.
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub track_id: String,
    pub split: Split,
    pub stems: Vec<StemRef>,
}

impl ManifestEntry {
    pub fn tags(&self) -> impl Iterator<Item = &str> {
        self.stems.iter().map(|s| s.tag.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub sample_rate: u32,
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedTrack {
    pub track_id: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct ScanOutcome {
    pub manifest: DatasetManifest,
    pub skipped: Vec<SkippedTrack>,
}

impl DatasetManifest {
    pub fn new(
        root: impl Into<PathBuf>,
        sample_rate: u32,
        entries: Vec<ManifestEntry>,
    ) -> Result<Self> {
        let m = Self {
            version: MANIFEST_VERSION,
            sample_rate,
            root: root.into(),
            entries,
        };
        m.check_invariants()?;
        Ok(m)
    }

    fn check_invariants(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.track_id.as_str()) {
                return Err(Error::config(format!(
                    "duplicate track id `{}`",
                    e.track_id
                )));
            }
            if e.stems.is_empty() {
                return Err(Error::config(format!(
                    "track `{}` has no stems",
                    e.track_id
                )));
            }
            if e.stems.iter().any(|s| s.tag.is_empty()) {
                return Err(Error::config(format!(
                    "track `{}` has an empty tag",
                    e.track_id
                )));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn split_counts(&self) -> BTreeMap<Split, usize> {
        let mut counts: BTreeMap<Split, usize> = Split::ALL.iter().map(|s| (*s, 0)).collect();
        for e in &self.entries {
            *counts.entry(e.split).or_default() += 1;
        }
        counts
    }

    pub fn stem_path(&self, stem: &StemRef) -> PathBuf {
        self.root.join(&stem.path)
    }

    pub fn vocabulary(&self) -> Result<TagVocabulary> {
        TagVocabulary::new(self.entries.iter().flat_map(|e| e.tags()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    /// Loads a manifest; a relative `root` is resolved against the manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::config(format!(
                "manifest {} has version {}, expected {MANIFEST_VERSION}",
                path.display(),
                m.version
            )));
        }
        if m.root.is_relative() {
            let base = path.parent().unwrap_or_else(|| Path::new("."));
            m.root = base.join(&m.root);
        }
        m.check_invariants()?;
        Ok(m)
    }
}

fn split_hash(seed: u64, track_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(track_id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes([d[0], d[1], d[2], d[3], d[4], d[5], d[6], d[7]])
}

/// Largest-remainder apportionment of `n` items to the three ratios.
fn split_sizes(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let total: f64 = ratios.iter().sum();
    let quotas: Vec<f64> = ratios.iter().map(|r| r / total * n as f64).collect();
    let mut sizes = [0usize; 3];
    for (s, q) in sizes.iter_mut().zip(&quotas) {
        *s = q.floor() as usize;
    }
    let mut remaining = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for i in order {
        if remaining == 0 {
            break;
        }
        sizes[i] += 1;
        remaining -= 1;
    }
    sizes
}

/// Deterministic split assignment: tracks are ordered by a seeded hash of
/// their id and the ordered list is cut into train/validation/test blocks.
pub fn assign_ratio_splits(track_ids: &[String], ratios: [f64; 3], seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..track_ids.len()).collect();
    order.sort_by(|&a, &b| {
        split_hash(seed, &track_ids[a])
            .cmp(&split_hash(seed, &track_ids[b]))
            .then_with(|| track_ids[a].cmp(&track_ids[b]))
    });
    let [n_train, n_val, _] = split_sizes(track_ids.len(), ratios);
    let mut out = vec![Split::Test; track_ids.len()];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Validation
        } else {
            Split::Test
        };
    }
    out
}

struct Candidate {
    track_id: String,
    explicit_split: Option<Split>,
    files: Vec<(String, PathBuf)>,
}

fn is_wav(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
}

fn file_stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn sorted_children(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn collect_track_dirs(
    base: &Path,
    split: Option<Split>,
    prefix: &str,
    out: &mut Vec<Candidate>,
) -> Result<()> {
    for dir in sorted_children(base)?.into_iter().filter(|p| p.is_dir()) {
        let name = dir.file_name().unwrap().to_string_lossy().into_owned();
        let mut files = Vec::new();
        for entry in WalkDir::new(&dir).sort_by_file_name() {
            let entry = entry.map_err(|e| Error::Layout(e.to_string()))?;
            let p = entry.path();
            if entry.file_type().is_file() && is_wav(p) {
                let stem = file_stem(p);
                if MIXTURE_NAMES.contains(&stem.to_lowercase().as_str()) {
                    continue;
                }
                files.push((stem, p.to_path_buf()));
            }
        }
        out.push(Candidate {
            track_id: format!("{prefix}{name}"),
            explicit_split: split,
            files,
        });
    }
    Ok(())
}

fn collect_flat(
    base: &Path,
    split: Option<Split>,
    prefix: &str,
    out: &mut Vec<Candidate>,
) -> Result<()> {
    let mut tracks: BTreeMap<String, Vec<(String, PathBuf)>> = BTreeMap::new();
    for p in sorted_children(base)?
        .into_iter()
        .filter(|p| p.is_file() && is_wav(p))
    {
        let stem = file_stem(&p);
        let Some((track, tag)) = stem.rsplit_once(FLAT_SEPARATOR) else {
            log::warn!(
                "{} does not follow <track>{FLAT_SEPARATOR}<tag>.wav, ignored",
                p.display()
            );
            continue;
        };
        if MIXTURE_NAMES.contains(&tag.to_lowercase().as_str()) {
            continue;
        }
        tracks
            .entry(track.to_string())
            .or_default()
            .push((tag.to_string(), p));
    }
    for (track, files) in tracks {
        out.push(Candidate {
            track_id: format!("{prefix}{track}"),
            explicit_split: split,
            files,
        });
    }
    Ok(())
}

/// Walks `root` and builds a manifest for the requested layout.
///
/// When the root contains `train`/`validation`/`test` directories, tracks are
/// collected below them and track ids are prefixed with the split directory
/// name. Tracks whose stem files cannot be opened are skipped and reported.
pub fn scan_dataset(
    root: &Path,
    layout: Layout,
    split_rule: SplitRule,
    sample_rate: u32,
) -> Result<ScanOutcome> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root does not exist"),
        ));
    }
    let split_dirs: Vec<(Split, PathBuf)> = sorted_children(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .filter_map(|p| {
            let name = p.file_name()?.to_string_lossy().into_owned();
            Split::from_dir_name(&name).map(|s| (s, p))
        })
        .collect();

    let mut candidates = Vec::new();
    let collect = match layout {
        Layout::PerTrackDirs => collect_track_dirs,
        Layout::FlatStems => collect_flat,
    };
    if split_dirs.is_empty() {
        if split_rule == SplitRule::Explicit {
            return Err(Error::Layout(format!(
                "explicit split rule needs train/validation/test directories under {}",
                root.display()
            )));
        }
        collect(root, None, "", &mut candidates)?;
    } else {
        for (split, dir) in &split_dirs {
            let prefix = format!("{}/", dir.file_name().unwrap().to_string_lossy());
            collect(dir, Some(*split), &prefix, &mut candidates)?;
        }
    }

    let mut skipped = Vec::new();
    let mut kept: Vec<(String, Option<Split>, Vec<StemRef>)> = Vec::new();
    for c in candidates {
        let mut stems = Vec::new();
        let mut problems = Vec::new();
        for (raw_tag, path) in &c.files {
            let tag = normalize_tag(raw_tag);
            if tag.is_empty() {
                problems.push(format!("{}: empty tag", path.display()));
                continue;
            }
            match audio::probe_wav(path) {
                Ok(_) => {
                    let rel = path.strip_prefix(root).unwrap_or(path);
                    stems.push(StemRef {
                        tag,
                        path: rel.to_string_lossy().replace('\\', "/"),
                    });
                }
                Err(e) => problems.push(e.to_string()),
            }
        }
        if stems.is_empty() {
            let reason = if problems.is_empty() {
                "no stem files".to_string()
            } else {
                format!("no readable stems ({})", problems.join("; "))
            };
            log::warn!("skipping track {}: {reason}", c.track_id);
            skipped.push(SkippedTrack {
                track_id: c.track_id,
                reason,
            });
        } else {
            kept.push((c.track_id, c.explicit_split, stems));
        }
    }

    let splits: Vec<Split> = match split_rule {
        SplitRule::Explicit => kept.iter().map(|k| k.1.expect("explicit split")).collect(),
        SplitRule::Ratio {
            train,
            validation,
            test,
            seed,
        } => {
            let ids: Vec<String> = kept.iter().map(|k| k.0.clone()).collect();
            assign_ratio_splits(&ids, [train, validation, test], seed)
        }
    };
    let entries = kept
        .into_iter()
        .zip(splits)
        .map(|((track_id, _, stems), split)| ManifestEntry {
            track_id,
            split,
            stems,
        })
        .collect();
    Ok(ScanOutcome {
        manifest: DatasetManifest::new(root, sample_rate, entries)?,
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum EntryStatus {
    Ok,
    MissingFile { path: String },
    DecodeError { path: String, message: String },
    LengthMismatch { frames: Vec<u64> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryReport {
    pub track_id: String,
    pub status: EntryStatus,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub entries: Vec<EntryReport>,
    pub total: usize,
    pub ok: usize,
    pub missing: usize,
    pub decode_errors: usize,
    pub length_mismatches: usize,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.ok == self.total
    }
}

/// Checks every referenced file: presence, full decodability and equal
/// stem durations. Problems become report records, never errors.
pub fn validate_manifest(manifest: &DatasetManifest) -> ValidationReport {
    let mut report = ValidationReport::default();
    for entry in &manifest.entries {
        let status = validate_entry(manifest, entry);
        match &status {
            EntryStatus::Ok => report.ok += 1,
            EntryStatus::MissingFile { .. } => report.missing += 1,
            EntryStatus::DecodeError { .. } => report.decode_errors += 1,
            EntryStatus::LengthMismatch { .. } => report.length_mismatches += 1,
        }
        report.entries.push(EntryReport {
            track_id: entry.track_id.clone(),
            status,
        });
    }
    report.total = manifest.entries.len();
    report
}

fn validate_entry(manifest: &DatasetManifest, entry: &ManifestEntry) -> EntryStatus {
    let mut durations = Vec::new();
    for stem in &entry.stems {
        let path = manifest.stem_path(stem);
        if !path.is_file() {
            return EntryStatus::MissingFile {
                path: path.display().to_string(),
            };
        }
        match audio::read_wav(&path) {
            Ok(a) if a.n_frames() == 0 => {
                return EntryStatus::DecodeError {
                    path: path.display().to_string(),
                    message: "zero-length stem".into(),
                }
            }
            Ok(a) => {
                // frames at the manifest rate, so mixed-rate stems compare fairly
                durations
                    .push(a.n_frames() as u64 * manifest.sample_rate as u64 / a.sample_rate as u64)
            }
            Err(e) => {
                return EntryStatus::DecodeError {
                    path: path.display().to_string(),
                    message: e.to_string(),
                }
            }
        }
    }
    if durations.windows(2).any(|w| w[0] != w[1]) {
        return EntryStatus::LengthMismatch { frames: durations };
    }
    EntryStatus::Ok
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_follow_ratios() {
        assert_eq!(split_sizes(10, [0.8, 0.1, 0.1]), [8, 1, 1]);
        assert_eq!(split_sizes(250, [0.8, 0.1, 0.1]), [200, 25, 25]);
        assert_eq!(split_sizes(0, [0.8, 0.1, 0.1]), [0, 0, 0]);
        assert_eq!(split_sizes(3, [1.0, 1.0, 1.0]), [1, 1, 1]);
    }

    #[test]
    fn ratio_assignment_is_a_seeded_partition() {
        let ids: Vec<String> = (0..50).map(|i| format!("track{i:03}")).collect();
        let a = assign_ratio_splits(&ids, [0.8, 0.1, 0.1], 17);
        let b = assign_ratio_splits(&ids, [0.8, 0.1, 0.1], 17);
        assert_eq!(a, b);
        assert_eq!(a.iter().filter(|s| **s == Split::Train).count(), 40);
        assert_eq!(a.iter().filter(|s| **s == Split::Validation).count(), 5);
        let c = assign_ratio_splits(&ids, [0.8, 0.1, 0.1], 18);
        assert_ne!(a, c);
    }

    #[test]
    fn bad_ratios_rejected() {
        assert!(SplitRule::ratio(-0.1, 0.5, 0.6, 0).is_err());
        assert!(SplitRule::ratio(0.0, 0.0, 0.0, 0).is_err());
    }

    #[test]
    fn split_names() {
        assert_eq!("valid".parse::<Split>().unwrap(), Split::Validation);
        assert!("dev".parse::<Split>().is_err());
        assert_eq!(
            serde_json::to_string(&Split::Validation).unwrap(),
            "\"validation\""
        );
    }
}
