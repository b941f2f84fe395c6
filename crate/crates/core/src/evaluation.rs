//! Coherent-pair classification accuracy, the COCOLA score, and score reports.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::audio::load_mono;
use crate::dataset::{DatasetManifest, Split, StemTrack};
use crate::encoder::{similarity, similarity_matrix, Embedding, Encoder};
use crate::error::{Error, Result};
use crate::sampling::{make_pair, mix, overlap, Rng, SamplerConfig, Window};
use crate::training::{
    batch_similarity, load_tracks, prepare_batch, tensor_to_array, PreparedBatch,
};

/// Fraction of rows whose maximum sits on the diagonal, and the number of
/// rows whose maximum was tied (ties resolve to the lowest index).
pub fn batch_accuracy(s: &Array2<f64>) -> Result<(f64, usize)> {
    let (k, j) = s.dim();
    if k != j || k == 0 {
        return Err(Error::shape(format!(
            "similarity matrix must be square and non-empty, got {k}x{j}"
        )));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("similarity matrix entry".into()));
    }
    let mut hits = 0;
    let mut ties = 0;
    for (r, row) in s.rows().into_iter().enumerate() {
        let mut best = 0;
        for c in 1..k {
            if row[c] > row[best] {
                best = c;
            }
        }
        if row.iter().filter(|v| **v == row[best]).count() > 1 {
            ties += 1;
        }
        if best == r {
            hits += 1;
        }
    }
    Ok((hits as f64 / k as f64, ties))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchCount {
    Batches(usize),
    /// One pass of non-overlapping windows over the split.
    FullEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub k: usize,
    pub n_batches: BatchCount,
    pub split: Split,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 2,
            n_batches: BatchCount::Batches(1000),
            split: Split::Test,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::config(format!(
                "classification needs k >= 2, got {}",
                self.k
            )));
        }
        if self.n_batches == BatchCount::Batches(0) {
            return Err(Error::config("n_batches must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub accuracy: f64,
    pub n_batches: usize,
    /// Rows whose argmax was tied.
    pub ties: usize,
    /// 95% normal-approximation half-width over the evaluated rows.
    pub confidence_half_width: f64,
    pub config: EvalConfig,
    pub window_len: usize,
    pub max_overlap: f64,
}

/// Classification with a caller-supplied similarity: `score(batch)` returns
/// the `K x K` matrix of one prepared batch.
pub fn evaluate_with<F>(
    encoder: &Encoder,
    tracks: &[StemTrack],
    sampler: &SamplerConfig,
    config: &EvalConfig,
    mut score: F,
) -> Result<AccuracyReport>
where
    F: FnMut(&PreparedBatch) -> Result<Array2<f64>>,
{
    config.validate()?;
    if tracks.is_empty() {
        return Err(Error::Empty(format!(
            "the {} split has no tracks",
            config.split
        )));
    }
    let sampler = SamplerConfig {
        batch_size: config.k,
        noise_sigma: 0.0,
        ..sampler.clone()
    };
    let mut rng = Rng::seed_from_u64(config.seed);
    let batches: Vec<PreparedBatch> = match config.n_batches {
        BatchCount::Batches(n) => (0..n)
            .map(|_| prepare_batch(encoder, tracks, &sampler, 0.0, &mut rng))
            .collect::<Result<_>>()?,
        BatchCount::FullEpoch => epoch_batches(encoder, tracks, &sampler, &mut rng)?,
    };
    if batches.is_empty() {
        return Err(Error::Empty(
            "not enough windows for one evaluation batch".into(),
        ));
    }
    let mut total = 0.0;
    let mut ties = 0;
    for b in &batches {
        let (acc, t) = batch_accuracy(&score(b)?)?;
        total += acc;
        ties += t;
    }
    let accuracy = total / batches.len() as f64;
    let rows = (batches.len() * config.k) as f64;
    Ok(AccuracyReport {
        accuracy,
        n_batches: batches.len(),
        ties,
        confidence_half_width: 1.96 * (accuracy * (1.0 - accuracy) / rows).sqrt(),
        config: config.clone(),
        window_len: sampler.window_len,
        max_overlap: sampler.max_overlap,
    })
}

/// Every non-overlapping window with two or more active stems, shuffled and
/// grouped into batches of `k`. Leftovers that cannot fill a batch are dropped.
fn epoch_batches(
    encoder: &Encoder,
    tracks: &[StemTrack],
    sampler: &SamplerConfig,
    rng: &mut Rng,
) -> Result<Vec<PreparedBatch>> {
    use rand::seq::SliceRandom;
    let len = sampler.window_len;
    let mut windows = Vec::new();
    for (i, t) in tracks.iter().enumerate() {
        let mut offset = 0;
        while offset + len <= t.n_samples() {
            let w = Window::cut(t, i, offset, len)?;
            if w.active_stems(sampler.silence_rms).len() >= 2 {
                windows.push(w);
            }
            offset += len;
        }
    }
    windows.shuffle(rng);
    let mut batches = Vec::new();
    for group in windows.chunks_exact(sampler.batch_size) {
        debug_assert!(group.iter().enumerate().all(|(a, x)| group[..a]
            .iter()
            .all(|y| x.track_index != y.track_index || overlap(x.offset, y.offset, len) == 0)));
        let mut batch = PreparedBatch {
            windows: Vec::new(),
            anchors: Vec::new(),
            candidates: Vec::new(),
        };
        for w in group {
            let pair = make_pair(w, sampler.subset_mode, sampler.silence_rms, rng)?;
            batch.anchors.push(encoder.features(&pair.mix_1)?);
            batch.candidates.push(encoder.features(&pair.mix_2)?);
            batch.windows.push((pair.track_id, pair.offset));
        }
        batches.push(batch);
    }
    Ok(batches)
}

/// Classification accuracy of `encoder` on one manifest split.
pub fn evaluate_classification(
    encoder: &Encoder,
    sampler: &SamplerConfig,
    manifest: &DatasetManifest,
    config: &EvalConfig,
) -> Result<AccuracyReport> {
    let tracks = load_tracks(manifest, config.split, encoder.config().mel.sample_rate)?;
    evaluate_tracks(encoder, &tracks, sampler, config)
}

/// Like [`evaluate_classification`] on already loaded tracks.
pub fn evaluate_tracks(
    encoder: &Encoder,
    tracks: &[StemTrack],
    sampler: &SamplerConfig,
    config: &EvalConfig,
) -> Result<AccuracyReport> {
    evaluate_with(encoder, tracks, sampler, config, |b| {
        tensor_to_array(&batch_similarity(encoder, b, None)?)
    })
}

/// CCS between two waveforms at the model sample rate.
pub fn cocola_score(encoder: &Encoder, y: &[f32], x: &[f32]) -> Result<f64> {
    let win = encoder.config().mel.win_length;
    for (name, clip) in [("first", y), ("second", x)] {
        if clip.len() < win {
            return Err(Error::shape(format!(
                "{name} clip has {} samples, at least {win} are required",
                clip.len()
            )));
        }
    }
    let hy = encoder.embed_waveform(y)?;
    let hx = encoder.embed_waveform(x)?;
    similarity(&hy, &hx, &encoder.head()?)
}

/// CCS between two stem sets, each summed first.
pub fn cocola_score_stems(encoder: &Encoder, y: &[&[f32]], x: &[&[f32]]) -> Result<f64> {
    cocola_score(encoder, &mix(y)?, &mix(x)?)
}

/// Index of the candidate with the largest Euclidean norm, lowest index on ties.
pub fn select_loudest_candidate(candidates: &[Vec<f32>]) -> Result<usize> {
    let first = candidates
        .first()
        .ok_or_else(|| Error::Empty("no candidates".into()))?;
    if candidates.iter().any(|c| c.len() != first.len()) {
        return Err(Error::shape("candidates must have equal lengths"));
    }
    let norms: Vec<f64> = candidates
        .iter()
        .map(|c| c.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>())
        .collect();
    let mut best = 0;
    for (i, n) in norms.iter().enumerate() {
        if *n > norms[best] {
            best = i;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSpec {
    pub pair_id: String,
    pub conditioning_path: PathBuf,
    /// One file, or several separated by `;` (the loudest is scored).
    pub candidate_path: String,
}

pub fn read_pairs(path: &Path) -> Result<Vec<PairSpec>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, e.to_string()),
        ),
        _ => Error::Csv(e),
    })?;
    let headers = rdr.headers()?.clone();
    let expected = ["pair_id", "conditioning_path", "candidate_path"];
    if headers.len() != 3 || headers.iter().zip(expected).any(|(h, e)| h.trim() != e) {
        return Err(Error::config(format!(
            "{} must have the header {}",
            path.display(),
            expected.join(",")
        )));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let resolve = |p: &str| {
            let p = Path::new(p.trim());
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        out.push(PairSpec {
            pair_id: rec[0].trim().to_string(),
            conditioning_path: resolve(&rec[1]),
            candidate_path: rec[2]
                .split(';')
                .map(|c| resolve(c).to_string_lossy().into_owned())
                .collect::<Vec<_>>()
                .join(";"),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub pair_id: String,
    pub ccs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowError {
    pub pair_id: String,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Aggregates {
    pub mean: f64,
    pub median: f64,
    pub count: usize,
}

impl Aggregates {
    pub fn from_scores(scores: &[f64]) -> Self {
        if scores.is_empty() {
            return Self::default();
        }
        let mut sorted = scores.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        Self {
            mean: scores.iter().sum::<f64>() / n as f64,
            median,
            count: n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreReport {
    pub rows: Vec<ScoreRow>,
    pub aggregates: Aggregates,
    pub errors: Vec<RowError>,
    /// Scores of real positive pairs from a test split.
    pub ground_truth: Vec<ScoreRow>,
    pub ground_truth_aggregates: Option<Aggregates>,
    pub head_symmetric: bool,
    pub fad_clap: Option<f64>,
    pub fad_encodec: Option<f64>,
    pub fad_vggish: Option<f64>,
}

impl ScoreReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["pair_id", "ccs"])?;
        for r in &self.rows {
            w.write_record([r.pair_id.clone(), format_score(r.ccs)])?;
        }
        for r in &self.ground_truth {
            w.write_record([format!("ground_truth:{}", r.pair_id), format_score(r.ccs)])?;
        }
        let a = &self.aggregates;
        w.write_record(["mean".to_string(), format_score(a.mean)])?;
        w.write_record(["median".to_string(), format_score(a.median)])?;
        w.write_record(["count".to_string(), a.count.to_string()])?;
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn format_score(v: f64) -> String {
    format!("{v:.9e}")
}

#[derive(Debug, Clone, Default)]
pub struct ScoreOptions {
    /// Real positive pairs from the manifest's test split, when given.
    pub ground_truth: Option<(DatasetManifest, usize)>,
    pub ground_truth_window: Option<usize>,
    pub seed: u64,
    pub fad_clap: Option<f64>,
    pub fad_encodec: Option<f64>,
    pub fad_vggish: Option<f64>,
}

fn score_pair(encoder: &Encoder, pair: &PairSpec) -> Result<f64> {
    let rate = encoder.config().mel.sample_rate;
    let y = load_mono(&pair.conditioning_path, rate)?;
    let candidates = pair
        .candidate_path
        .split(';')
        .map(|p| load_mono(Path::new(p), rate))
        .collect::<Result<Vec<_>>>()?;
    let pick = if candidates.len() == 1 {
        0
    } else {
        select_loudest_candidate(&candidates)?
    };
    let x = &candidates[pick];
    let n = y.len().min(x.len());
    cocola_score(encoder, &y[..n], &x[..n])
}

/// Scores each pair; unreadable pairs become error records.
pub fn score_report(
    encoder: &Encoder,
    pairs: &[PairSpec],
    options: &ScoreOptions,
) -> Result<ScoreReport> {
    let mut report = ScoreReport {
        head_symmetric: encoder.head()?.is_symmetric(1e-6),
        fad_clap: options.fad_clap,
        fad_encodec: options.fad_encodec,
        fad_vggish: options.fad_vggish,
        ..ScoreReport::default()
    };
    for pair in pairs {
        match score_pair(encoder, pair) {
            Ok(ccs) => report.rows.push(ScoreRow {
                pair_id: pair.pair_id.clone(),
                ccs,
            }),
            Err(e) => report.errors.push(RowError {
                pair_id: pair.pair_id.clone(),
                message: e.to_string(),
            }),
        }
    }
    let scores: Vec<f64> = report.rows.iter().map(|r| r.ccs).collect();
    report.aggregates = Aggregates::from_scores(&scores);
    if let Some((manifest, n)) = &options.ground_truth {
        let window = options
            .ground_truth_window
            .unwrap_or(5 * encoder.config().mel.sample_rate as usize);
        let tracks = load_tracks(manifest, Split::Test, encoder.config().mel.sample_rate)?;
        report.ground_truth = ground_truth_scores(encoder, &tracks, window, *n, options.seed)?;
        let gt: Vec<f64> = report.ground_truth.iter().map(|r| r.ccs).collect();
        report.ground_truth_aggregates = Some(Aggregates::from_scores(&gt));
    }
    Ok(report)
}

/// Scores of `n` positive pairs drawn with the training sub-mix sampler.
pub fn ground_truth_scores(
    encoder: &Encoder,
    tracks: &[StemTrack],
    window_len: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<ScoreRow>> {
    let sampler = SamplerConfig {
        window_len,
        batch_size: 1,
        noise_sigma: 0.0,
        ..SamplerConfig::default()
    };
    let mut rng = Rng::seed_from_u64(seed);
    let head = encoder.head()?;
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let batch = prepare_batch(encoder, tracks, &sampler, 0.0, &mut rng)?;
        let a = encoder.embed(&batch.anchors[0], None)?;
        let b = encoder.embed(&batch.candidates[0], None)?;
        let (track, offset) = &batch.windows[0];
        rows.push(ScoreRow {
            pair_id: format!("{i}:{track}@{offset}"),
            ccs: similarity(&a, &b, &head)?,
        });
    }
    Ok(rows)
}

/// Area under the ROC curve for `positives` ranked above `negatives`; ties count one half.
pub fn roc_auc(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Empty("ROC-AUC needs positives and negatives".into()));
    }
    let mut wins = 0.0;
    for p in positives {
        for n in negatives {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(wins / (positives.len() * negatives.len()) as f64)
}

/// Similarity matrix of already embedded anchors and candidates.
pub fn embedding_similarity(
    encoder: &Encoder,
    anchors: &[Embedding],
    candidates: &[Embedding],
) -> Result<Array2<f64>> {
    similarity_matrix(anchors, candidates, &encoder.head()?)
}
