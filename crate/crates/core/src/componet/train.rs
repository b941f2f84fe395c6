//! Denoising score matching for the base denoiser and the adapter, plus
//! the adapter checkpoint format.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use log::info;
use ndarray::Array2;
use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::componet::codec::{LatentClip, StubCodec};
use crate::componet::model::{AdapterModel, Denoiser, DenoiserConfig, EpsModel};
use crate::componet::prompt::{build_prompt, Prompt};
use crate::componet::sample::randn;
use crate::componet::schedule::{NoiseSchedule, DEFAULT_STEPS};
use crate::componet::task::{sample_task, TaskLabel, TaskPolicy};
use crate::dataset::{DatasetManifest, Split, TagVocabulary};
use crate::error::{Error, Result};
use crate::nn::sum_sq_per_row;
use crate::sampling::Rng;
use crate::training::{load_tracks, write_atomic};

pub const COMPONET_VERSION: u32 = 1;
const META_KEY: &str = "componet";

/// `mean_b ||eps_b - pred_b||^2`.
pub fn score_matching_loss(pred: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if pred.dims() != eps.dims() {
        return Err(Error::shape(format!(
            "prediction {:?} vs noise {:?}",
            pred.dims(),
            eps.dims()
        )));
    }
    Ok(sum_sq_per_row(&(eps - pred)?)?.mean_all()?)
}

/// A track with every stem already encoded to a latent of equal length.
#[derive(Debug, Clone)]
pub struct LatentTrack {
    pub track_id: String,
    pub tags: Vec<String>,
    pub stems: Vec<LatentClip>,
}

impl LatentTrack {
    pub fn len(&self) -> usize {
        self.stems.first().map_or(0, LatentClip::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sum of the selected stems over `[offset, offset + len)`; zeros when `subset` is empty.
    pub fn mix(&self, subset: &[usize], offset: usize, len: usize) -> Array2<f32> {
        let c = self.stems[0].channels();
        let mut out = Array2::zeros((c, len));
        for &s in subset {
            out += &self.stems[s].z.slice(ndarray::s![.., offset..offset + len]);
        }
        out
    }
}

/// One training batch: targets `z`, optional conditioning `w`, prompts.
#[derive(Debug, Clone)]
pub struct DiffusionBatch {
    pub z: Tensor,
    pub w: Option<Tensor>,
    pub prompts: Vec<Prompt>,
    pub labels: Vec<TaskLabel>,
}

fn stack(arrays: &[Array2<f32>], dtype: DType) -> Result<Tensor> {
    let (c, l) = arrays[0].dim();
    let data: Vec<f32> = arrays.iter().flat_map(|a| a.iter().copied()).collect();
    Ok(Tensor::from_vec(data, (arrays.len(), c, l), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Draws `batch_size` tasks: a track, a task, a crop, the output mix as
/// target and the input mix as conditioning.
pub fn sample_diffusion_batch(
    data: &[LatentTrack],
    vocab: &TagVocabulary,
    crop: usize,
    batch_size: usize,
    policy: &TaskPolicy,
    dtype: DType,
    rng: &mut Rng,
) -> Result<DiffusionBatch> {
    let pool: Vec<&LatentTrack> = data.iter().filter(|t| t.len() >= crop).collect();
    if pool.is_empty() {
        return Err(Error::Empty(format!("no latent track has {crop} frames")));
    }
    let (mut zs, mut ws, mut prompts, mut labels) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for _ in 0..batch_size {
        let track = pool[rng.random_range(0..pool.len())];
        let task = sample_task(track.stems.len(), policy, rng)?;
        let offset = rng.random_range(0..=track.len() - crop);
        zs.push(track.mix(&task.outputs, offset, crop));
        ws.push(track.mix(&task.inputs, offset, crop));
        let tags = |idx: &[usize]| {
            idx.iter()
                .map(|&i| track.tags[i].clone())
                .collect::<Vec<_>>()
        };
        prompts.push(build_prompt(
            &tags(&task.inputs),
            &tags(&task.outputs),
            vocab,
        )?);
        labels.push(task.label);
    }
    Ok(DiffusionBatch {
        z: stack(&zs, dtype)?,
        w: Some(stack(&ws, dtype)?),
        prompts,
        labels,
    })
}

/// Noises a batch at uniformly drawn steps and returns the score-matching loss.
pub fn diffusion_loss<M: EpsModel>(
    model: &M,
    batch: &DiffusionBatch,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Tensor> {
    let b = batch.prompts.len();
    let t: Vec<usize> = (0..b)
        .map(|_| rng.random_range(0..=schedule.max_step()))
        .collect();
    let eps = randn(batch.z.dims(), batch.z.dtype(), rng)?;
    let z_t = schedule.forward_noise_tensor(&batch.z, &t, &eps)?;
    let pred = model.predict(&z_t, &batch.prompts, &t, batch.w.as_ref())?;
    let loss = score_matching_loss(&pred, &eps)?;
    let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !value.is_finite() {
        let pred_norm = pred
            .sqr()?
            .sum_all()?
            .to_dtype(DType::F64)?
            .to_scalar::<f64>()?;
        return Err(Error::NonFinite(format!(
            "score-matching loss at steps {t:?} (prediction squared norm {pred_norm})"
        )));
    }
    Ok(loss)
}

/// Runs `steps` Adam steps on `vars` only; returns the per-step losses.
pub fn fit<M, F>(
    model: &M,
    vars: Vec<Var>,
    lr: f64,
    steps: usize,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
    mut next_batch: F,
) -> Result<Vec<f64>>
where
    M: EpsModel,
    F: FnMut(&mut Rng) -> Result<DiffusionBatch>,
{
    let mut opt = AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            weight_decay: 0.0,
            ..ParamsAdamW::default()
        },
    )?;
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let batch = next_batch(rng)?;
        let loss = diffusion_loss(model, &batch, schedule, rng)?;
        losses.push(loss.to_dtype(DType::F64)?.to_scalar::<f64>()?);
        opt.backward_step(&loss)?;
    }
    Ok(losses)
}

/// Trains `psi` only, on batches with conditioning; the base is untouched.
pub fn adapter_train<F>(
    model: &AdapterModel,
    steps: usize,
    lr: f64,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
    next_batch: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&mut Rng) -> Result<DiffusionBatch>,
{
    fit(
        model,
        model.adapter.params().vars(),
        lr,
        steps,
        schedule,
        rng,
        next_batch,
    )
}

/// Trains the base denoiser on prompts alone.
pub fn base_train<F>(
    base: &Denoiser,
    steps: usize,
    lr: f64,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
    mut next_batch: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&mut Rng) -> Result<DiffusionBatch>,
{
    fit(
        base,
        base.params().vars(),
        lr,
        steps,
        schedule,
        rng,
        move |r| {
            let mut b = next_batch(r)?;
            b.w = None;
            Ok(b)
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComponetConfig {
    pub denoiser: DenoiserConfig,
    pub schedule_steps: usize,
    pub sample_rate: u32,
    pub codec_frame: usize,
    /// Latent frames per training crop and default generation length.
    pub crop: usize,
    pub batch_size: usize,
    pub base_steps: usize,
    pub base_lr: f64,
    pub adapter_steps: usize,
    pub adapter_lr: f64,
    pub policy: TaskPolicy,
    pub seed: u64,
}

impl Default for ComponetConfig {
    fn default() -> Self {
        Self {
            denoiser: DenoiserConfig::default(),
            schedule_steps: DEFAULT_STEPS,
            sample_rate: 16_000,
            codec_frame: crate::componet::codec::DEFAULT_FRAME,
            crop: 64,
            batch_size: 16,
            base_steps: 300,
            base_lr: 1e-3,
            adapter_steps: 300,
            adapter_lr: 1e-4,
            policy: TaskPolicy::All,
            seed: 0,
        }
    }
}

impl ComponetConfig {
    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        if self.schedule_steps == 0
            || self.crop == 0
            || self.batch_size == 0
            || self.codec_frame == 0
        {
            return Err(Error::config(
                "schedule_steps, crop, batch_size and codec_frame must be positive",
            ));
        }
        if !(self.base_lr >= 0.0 && self.adapter_lr >= 0.0) {
            return Err(Error::config("learning rates must be non-negative"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Everything besides weights needed to rebuild and run the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponetMeta {
    pub version: u32,
    pub base_hash: String,
    pub denoiser: DenoiserConfig,
    pub schedule: NoiseSchedule,
    pub vocab: TagVocabulary,
    pub codec: StubCodec,
    pub sample_rate: u32,
    pub latent_len: usize,
}

fn serialize_store(store: &crate::nn::ParamStore, meta: &ComponetMeta, path: &Path) -> Result<()> {
    let mut md = HashMap::new();
    md.insert(META_KEY.to_string(), serde_json::to_string(meta)?);
    let bytes = safetensors::tensor::serialize(store.tensors(), Some(md)).map_err(|e| {
        Error::Checkpoint {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    })?;
    write_atomic(path, &bytes)
}

fn read_store(path: &Path) -> Result<(ComponetMeta, HashMap<String, Tensor>)> {
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
    if found != COMPONET_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found,
            supported: COMPONET_VERSION,
        });
    }
    let meta = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)
        .map_err(|e| bad(e.to_string()))?;
    Ok((meta, tensors))
}

pub const BASE_FILE: &str = "base.safetensors";
pub const ADAPTER_FILE: &str = "adapter.safetensors";

/// Writes `base.safetensors` and `adapter.safetensors` into `dir`.
pub fn save_componet(model: &AdapterModel, meta: &ComponetMeta, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = ComponetMeta {
        base_hash: model.base.params().checksum()?,
        ..meta.clone()
    };
    serialize_store(model.base.params(), &meta, &dir.join(BASE_FILE))?;
    serialize_store(model.adapter.params(), &meta, &dir.join(ADAPTER_FILE))
}

/// Loads a model saved by [`save_componet`], checking the base hash.
pub fn load_componet(dir: &Path) -> Result<(AdapterModel, ComponetMeta)> {
    let (base_meta, base_tensors) = read_store(&dir.join(BASE_FILE))?;
    let (meta, adapter_tensors) = read_store(&dir.join(ADAPTER_FILE))?;
    let mut rng = Rng::seed_from_u64(0);
    let base = Denoiser::new(meta.denoiser.clone(), DType::F32, &mut rng)?;
    base.params().assign(&base_tensors)?;
    let hash = base.params().checksum()?;
    if hash != meta.base_hash || base_meta.base_hash != meta.base_hash {
        return Err(Error::Checkpoint {
            path: dir.join(ADAPTER_FILE),
            message: format!("adapter expects base {}, found {hash}", meta.base_hash),
        });
    }
    let model = AdapterModel::new(base, &mut rng)?;
    model.adapter.params().assign(&adapter_tensors)?;
    Ok((model, meta))
}

#[derive(Debug, Clone)]
pub struct ComponetOutcome {
    pub model: AdapterModel,
    pub meta: ComponetMeta,
    pub base_losses: Vec<f64>,
    pub adapter_losses: Vec<f64>,
    pub dir: PathBuf,
}

/// Encodes the train split, scales latents to unit variance, trains the base
/// then the adapter, and writes both checkpoints plus `componet_metrics.csv`.
pub fn train_componet(
    manifest: &DatasetManifest,
    config: &ComponetConfig,
    out_dir: &Path,
) -> Result<ComponetOutcome> {
    config.validate()?;
    let tracks = load_tracks(manifest, Split::Train, config.sample_rate)?;
    if tracks.is_empty() {
        return Err(Error::Empty("the manifest has no train tracks".into()));
    }
    let vocab = manifest.vocabulary()?;
    let mut codec = StubCodec {
        frame: config.codec_frame,
        latent_scale: 1.0,
    };
    let mut data = Vec::with_capacity(tracks.len());
    for t in &tracks {
        data.push(LatentTrack {
            track_id: t.track_id.clone(),
            tags: t
                .stems
                .iter()
                .map(|s| crate::dataset::normalize_tag(&s.tag))
                .collect(),
            stems: t
                .stems
                .iter()
                .map(|s| codec.encode(&s.samples))
                .collect::<Result<_>>()?,
        });
    }
    let (mut sum, mut sq, mut n) = (0f64, 0f64, 0usize);
    for v in data
        .iter()
        .flat_map(|t| t.stems.iter())
        .flat_map(|s| s.z.iter())
    {
        sum += *v as f64;
        sq += (*v as f64).powi(2);
        n += 1;
    }
    let std = (sq / n as f64 - (sum / n as f64).powi(2)).max(0.0).sqrt();
    codec.latent_scale = if std > 1e-12 { (1.0 / std) as f32 } else { 1.0 };
    for t in &mut data {
        for s in &mut t.stems {
            s.z.mapv_inplace(|v| v * codec.latent_scale);
        }
    }

    let schedule = NoiseSchedule::cosine(config.schedule_steps)?;
    let denoiser = DenoiserConfig {
        n_tags: vocab.len(),
        ..config.denoiser.clone()
    };
    let mut rng = Rng::seed_from_u64(config.seed);
    let base = Denoiser::new(denoiser.clone(), DType::F32, &mut rng)?;
    let next = |r: &mut Rng| {
        sample_diffusion_batch(
            &data,
            &vocab,
            config.crop,
            config.batch_size,
            &config.policy,
            DType::F32,
            r,
        )
    };
    info!(
        "pretraining the base denoiser for {} steps",
        config.base_steps
    );
    let base_losses = base_train(
        &base,
        config.base_steps,
        config.base_lr,
        &schedule,
        &mut rng,
        next,
    )?;
    let model = AdapterModel::new(base, &mut rng)?;
    info!("training the adapter for {} steps", config.adapter_steps);
    let adapter_losses = adapter_train(
        &model,
        config.adapter_steps,
        config.adapter_lr,
        &schedule,
        &mut rng,
        next,
    )?;

    let meta = ComponetMeta {
        version: COMPONET_VERSION,
        base_hash: String::new(),
        denoiser,
        schedule,
        vocab,
        codec,
        sample_rate: config.sample_rate,
        latent_len: config.crop,
    };
    save_componet(&model, &meta, out_dir)?;
    let mut w = csv::Writer::from_path(out_dir.join("componet_metrics.csv"))?;
    w.write_record(["phase", "step", "loss"])?;
    for (phase, losses) in [("base", &base_losses), ("adapter", &adapter_losses)] {
        for (i, l) in losses.iter().enumerate() {
            w.write_record([phase.to_string(), (i + 1).to_string(), format!("{l:.9e}")])?;
        }
    }
    w.flush().map_err(|e| Error::io(out_dir, e))?;
    let meta = ComponetMeta {
        base_hash: model.base.params().checksum()?,
        ..meta
    };
    Ok(ComponetOutcome {
        model,
        meta,
        base_losses,
        adapter_losses,
        dir: out_dir.to_path_buf(),
    })
}
