//! Contrastive training loop, checkpoints and metric logs.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use log::{info, warn};
use ndarray::Array2;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_track, DatasetManifest, LoadOptions, Split, StemTrack};
use crate::encoder::{similarity_matrix_tensor, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::evaluation::batch_accuracy;
use crate::frontend::{FeatureMap, FeatureStats};
use crate::sampling::{augment, make_pair, mix, sample_batch, Rng, SamplerConfig};

pub const CHECKPOINT_VERSION: u32 = 1;
const META_KEY: &str = "cocola";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub sampler: SamplerConfig,
    pub encoder: EncoderConfig,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub max_steps: usize,
    /// Checkpoint (and validation) period in steps; 0 keeps only the final checkpoint.
    pub eval_every: usize,
    pub seed: u64,
    /// Adds the column-wise (candidate-anchored) cross-entropy term.
    pub symmetric_loss: bool,
    /// Batches of K=2 drawn from the validation split at each checkpoint.
    pub validation_batches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig::default(),
            encoder: EncoderConfig::default(),
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            max_steps: 100_000,
            eval_every: 1000,
            seed: 0,
            symmetric_loss: false,
            validation_batches: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        self.encoder.validate()?;
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning_rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.max_steps == 0 {
            return Err(Error::config("max_steps must be at least 1"));
        }
        if self.encoder.mel.n_frames(self.sampler.window_len).is_none() {
            return Err(Error::config(format!(
                "window_len = {} is shorter than the mel win_length {}",
                self.sampler.window_len, self.encoder.mel.win_length
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        Ok(cfg)
    }
}

fn check_square(s: &Array2<f64>) -> Result<usize> {
    let (k, j) = s.dim();
    if k != j || k == 0 {
        return Err(Error::shape(format!(
            "similarity matrix must be square and non-empty, got {k}x{j}"
        )));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("similarity matrix entry".into()));
    }
    Ok(k)
}

fn log_sum_exp(row: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = row.clone().fold(f64::NEG_INFINITY, f64::max);
    m + row.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `-sum_k log softmax(S[k])[k]`, with rows as anchors.
pub fn contrastive_loss(s: &Array2<f64>) -> Result<f64> {
    check_square(s)?;
    let loss: f64 = s
        .rows()
        .into_iter()
        .enumerate()
        .map(|(k, row)| log_sum_exp(row.iter().copied()) - row[k])
        .sum();
    Ok(loss.max(0.0))
}

/// Gradient of [`contrastive_loss`] with respect to `S`: `softmax(S[k]) - e_k` per row.
pub fn contrastive_loss_grad(s: &Array2<f64>) -> Result<Array2<f64>> {
    let k = check_square(s)?;
    let mut g = Array2::zeros((k, k));
    for (r, row) in s.rows().into_iter().enumerate() {
        let lse = log_sum_exp(row.iter().copied());
        for c in 0..k {
            g[[r, c]] = (row[c] - lse).exp() - if r == c { 1.0 } else { 0.0 };
        }
    }
    Ok(g)
}

/// Differentiable loss on a `(K, K)` similarity tensor.
pub fn contrastive_loss_tensor(s: &Tensor, symmetric: bool) -> Result<Tensor> {
    let (k, j) = s.dims2()?;
    if k != j {
        return Err(Error::shape(format!(
            "similarity matrix must be square, got {k}x{j}"
        )));
    }
    let eye = Tensor::eye(k, s.dtype(), s.device())?;
    let row_term = (candle_nn::ops::log_softmax(s, D::Minus1)? * &eye)?
        .sum_all()?
        .neg()?;
    if !symmetric {
        return Ok(row_term);
    }
    let col_term = (candle_nn::ops::log_softmax(&s.t()?, D::Minus1)? * &eye)?
        .sum_all()?
        .neg()?;
    Ok((row_term + col_term)?)
}

/// One batch of positive pairs turned into features.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    /// `(track_id, offset)` of each window.
    pub windows: Vec<(String, usize)>,
    pub anchors: Vec<FeatureMap>,
    pub candidates: Vec<FeatureMap>,
}

/// Samples `sampler.batch_size` windows, draws disjoint sub-mixes, adds
/// noise of std `sigma`, and computes features.
pub fn prepare_batch(
    encoder: &Encoder,
    tracks: &[StemTrack],
    sampler: &SamplerConfig,
    sigma: f64,
    rng: &mut Rng,
) -> Result<PreparedBatch> {
    let windows = sample_batch(tracks, sampler, 2, rng)?;
    let mut batch = PreparedBatch {
        windows: Vec::with_capacity(windows.len()),
        anchors: Vec::with_capacity(windows.len()),
        candidates: Vec::with_capacity(windows.len()),
    };
    for w in &windows {
        let pair = make_pair(w, sampler.subset_mode, sampler.silence_rms, rng)?;
        let a = augment(&pair.mix_1, sigma, rng);
        let b = augment(&pair.mix_2, sigma, rng);
        batch.anchors.push(encoder.features(&a)?);
        batch.candidates.push(encoder.features(&b)?);
        batch.windows.push((pair.track_id, pair.offset));
    }
    Ok(batch)
}

/// Similarity matrix of a prepared batch; `train_rng` enables dropout.
pub fn batch_similarity(
    encoder: &Encoder,
    batch: &PreparedBatch,
    train_rng: Option<&mut Rng>,
) -> Result<Tensor> {
    let k = batch.anchors.len();
    let all: Vec<FeatureMap> = batch
        .anchors
        .iter()
        .chain(&batch.candidates)
        .cloned()
        .collect();
    let h = encoder.forward(&encoder.batch_tensor(&all)?, train_rng)?;
    let h1 = h.narrow(0, 0, k)?;
    let h2 = h.narrow(0, k, k)?;
    similarity_matrix_tensor(&h1, &h2, encoder.head_tensor())
}

pub fn tensor_to_array(s: &Tensor) -> Result<Array2<f64>> {
    let (k, j) = s.dims2()?;
    let v = s.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Array2::from_shape_vec((k, j), v).map_err(|e| Error::shape(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub batch_accuracy: f64,
}

/// Mutable training state: model, optimizer and the sampling RNG.
pub struct Trainer {
    config: TrainConfig,
    encoder: Encoder,
    optimizer: AdamW,
    rng: Rng,
    step: usize,
    history: Vec<StepMetrics>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        Self::with_dtype(config, DType::F32)
    }

    pub fn with_dtype(config: TrainConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::seed_from_u64(config.seed);
        let encoder = Encoder::with_dtype(config.encoder.clone(), dtype, &mut rng)?;
        Self::from_encoder(config, encoder, rng)
    }

    /// Continues from an existing model with a given RNG state.
    pub fn from_encoder(config: TrainConfig, encoder: Encoder, rng: Rng) -> Result<Self> {
        config.validate()?;
        let params = ParamsAdamW {
            lr: config.learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let optimizer = AdamW::new(encoder.params().vars(), params)?;
        Ok(Self {
            config,
            encoder,
            optimizer,
            rng,
            step: 0,
            history: Vec::new(),
        })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn encoder_mut(&mut self) -> &mut Encoder {
        &mut self.encoder
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn history(&self) -> &[StepMetrics] {
        &self.history
    }

    pub fn rng_mut(&mut self) -> &mut Rng {
        &mut self.rng
    }

    /// Samples a batch from `tracks` and applies one optimizer step.
    pub fn train_step(&mut self, tracks: &[StemTrack]) -> Result<StepMetrics> {
        let batch = prepare_batch(
            &self.encoder,
            tracks,
            &self.config.sampler,
            self.config.sampler.noise_sigma,
            &mut self.rng,
        )?;
        self.train_on(&batch)
    }

    /// One optimizer step on a prepared batch. Returns the pre-update loss.
    pub fn train_on(&mut self, batch: &PreparedBatch) -> Result<StepMetrics> {
        let s = batch_similarity(&self.encoder, batch, Some(&mut self.rng))?;
        let loss = contrastive_loss_tensor(&s, self.config.symmetric_loss)?;
        let loss_value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !loss_value.is_finite() {
            let ids: Vec<String> = batch
                .windows
                .iter()
                .map(|(t, o)| format!("{t}@{o}"))
                .collect();
            return Err(Error::NonFinite(format!(
                "loss {loss_value} at step {} on windows [{}]",
                self.step + 1,
                ids.join(", ")
            )));
        }
        let (accuracy, _) = batch_accuracy(&tensor_to_array(&s)?)?;
        self.optimizer.backward_step(&loss)?;
        self.step += 1;
        let m = StepMetrics {
            step: self.step,
            loss: loss_value,
            batch_accuracy: accuracy,
        };
        self.history.push(m);
        Ok(m)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            encoder: self.encoder.clone(),
            train_config: Some(self.config.clone()),
            rng_state: Some(self.rng.clone()),
            history: self.history.clone(),
        }
    }
}

/// A self-contained model snapshot.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: usize,
    pub encoder: Encoder,
    pub train_config: Option<TrainConfig>,
    pub rng_state: Option<Rng>,
    pub history: Vec<StepMetrics>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    version: u32,
    step: usize,
    encoder: EncoderConfig,
    feature_stats: Option<FeatureStats>,
    train_config: Option<TrainConfig>,
    rng_state: Option<Rng>,
    history: Vec<StepMetrics>,
}

/// Writes `bytes` to `path` through a temporary sibling file, removing it on failure.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    let result = (|| {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION,
        step: ckpt.step,
        encoder: ckpt.encoder.config().clone(),
        feature_stats: ckpt.encoder.feature_stats().cloned(),
        train_config: ckpt.train_config.clone(),
        rng_state: ckpt.rng_state.clone(),
        history: ckpt.history.clone(),
    };
    let mut md = HashMap::new();
    md.insert(META_KEY.to_string(), serde_json::to_string(&meta)?);
    let tensors = ckpt.encoder.params().tensors();
    let bytes = safetensors::tensor::serialize(
        tensors.iter().map(|(k, v)| (k.clone(), v.clone())),
        Some(md),
    )
    .map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bad = |message: String| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) =
        safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
    let raw = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| bad("missing model metadata".into()))?;
    let value: serde_json::Value = serde_json::from_str(raw).map_err(|e| bad(e.to_string()))?;
    let found = value
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| bad("missing version tag".into()))? as u32;
    if found != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found,
            supported: CHECKPOINT_VERSION,
        });
    }
    let meta: CheckpointMeta = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)
        .map_err(|e| bad(e.to_string()))?;
    let mut encoder = Encoder::new(meta.encoder, &mut Rng::seed_from_u64(0))?;
    encoder
        .params()
        .assign(&tensors)
        .map_err(|e| bad(e.to_string()))?;
    encoder.set_feature_stats(meta.feature_stats)?;
    Ok(Checkpoint {
        step: meta.step,
        encoder,
        train_config: meta.train_config,
        rng_state: meta.rng_state,
        history: meta.history,
    })
}

/// Loads one split at the model sample rate.
pub fn load_tracks(
    manifest: &DatasetManifest,
    split: Split,
    sample_rate: u32,
) -> Result<Vec<StemTrack>> {
    manifest
        .split(split)
        .map(|e| load_track(manifest, e, sample_rate, LoadOptions::default()))
        .collect()
}

/// Per-bin statistics from the full mixtures of up to 64 tracks.
pub fn estimate_feature_stats(encoder: &Encoder, tracks: &[StemTrack]) -> Result<FeatureStats> {
    let maps = tracks
        .iter()
        .take(64)
        .map(|t| {
            let stems: Vec<&[f32]> = t.stems.iter().map(|s| s.samples.as_slice()).collect();
            encoder.frontend().features(&mix(&stems)?)
        })
        .collect::<Result<Vec<_>>>()?;
    FeatureStats::estimate(&maps)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub final_path: PathBuf,
}

/// Runs `max_steps` steps on the train split, writing `metrics.csv`,
/// `timing.csv`, periodic `step_NNNNNN.safetensors` and `final.safetensors`.
pub fn train(
    manifest: &DatasetManifest,
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let rate = config.encoder.mel.sample_rate;
    let tracks = load_tracks(manifest, Split::Train, rate)?;
    if tracks.is_empty() {
        return Err(Error::Empty("the manifest has no train tracks".into()));
    }
    let validation = if config.validation_batches > 0 {
        load_tracks(manifest, Split::Validation, rate)?
    } else {
        Vec::new()
    };
    let mut trainer = Trainer::new(config.clone())?;
    if config.encoder.standardize_features {
        let stats = estimate_feature_stats(trainer.encoder(), &tracks)?;
        trainer.encoder_mut().set_feature_stats(Some(stats))?;
    }
    info!(
        "training on {} tracks, {} parameters, {} steps",
        tracks.len(),
        trainer.encoder().params().num_params(),
        config.max_steps
    );

    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = csv::Writer::from_path(&metrics_path)?;
    metrics.write_record(["step", "loss", "batch_accuracy"])?;
    let mut timing = csv::Writer::from_path(out_dir.join("timing.csv"))?;
    timing.write_record(["step", "wallclock_s"])?;
    let mut val_log = None;
    let start = Instant::now();

    for _ in 0..config.max_steps {
        let m = trainer.train_step(&tracks)?;
        metrics.write_record([
            m.step.to_string(),
            format!("{:.9e}", m.loss),
            format!("{:.6}", m.batch_accuracy),
        ])?;
        metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
        timing.write_record([
            m.step.to_string(),
            format!("{:.3}", start.elapsed().as_secs_f64()),
        ])?;
        if config.eval_every > 0 && m.step % config.eval_every == 0 && m.step < config.max_steps {
            info!(
                "step {} loss {:.4} acc {:.3}",
                m.step, m.loss, m.batch_accuracy
            );
            save_checkpoint(
                &trainer.checkpoint(),
                &out_dir.join(format!("step_{:06}.safetensors", m.step)),
            )?;
            if !validation.is_empty() {
                let w = val_log.get_or_insert_with(|| {
                    let mut w = csv::Writer::from_path(out_dir.join("validation.csv")).ok()?;
                    w.write_record(["step", "accuracy"]).ok()?;
                    Some(w)
                });
                let acc = validation_accuracy(trainer.encoder(), &validation, config)?;
                match w {
                    Some(w) => {
                        w.write_record([m.step.to_string(), format!("{acc:.6}")])?;
                        w.flush().map_err(|e| Error::io(out_dir, e))?;
                    }
                    None => warn!("cannot write validation.csv"),
                }
            }
        }
    }
    timing.flush().map_err(|e| Error::io(out_dir, e))?;
    let checkpoint = trainer.checkpoint();
    let final_path = out_dir.join("final.safetensors");
    save_checkpoint(&checkpoint, &final_path)?;
    Ok(TrainOutcome {
        checkpoint,
        final_path,
    })
}

fn validation_accuracy(
    encoder: &Encoder,
    tracks: &[StemTrack],
    config: &TrainConfig,
) -> Result<f64> {
    let sampler = SamplerConfig {
        batch_size: 2,
        ..config.sampler.clone()
    };
    let mut rng = Rng::seed_from_u64(config.seed ^ 0x5eed);
    let mut total = 0.0;
    for _ in 0..config.validation_batches {
        let batch = prepare_batch(encoder, tracks, &sampler, 0.0, &mut rng)?;
        total += batch_accuracy(&tensor_to_array(&batch_similarity(encoder, &batch, None)?)?)?.0;
    }
    Ok(total / config.validation_batches as f64)
}
