//! The embedding network and the bilinear similarity head.
//!
//! The network is a stack of strided 3x3 convolution blocks over the log-mel
//! map, mean pooling over time, and an affine projection to `d` dimensions.
//! Similarity between two embeddings is the bilinear form `h1^T W h2` with a
//! learnable `W` initialized to the identity.

use candle_core::{DType, Device, Module, Tensor, D};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{FeatureMap, FeatureStats, MelConfig, MelFrontend};
use crate::nn::{dropout, Conv2d, Linear, ParamStore};
use crate::sampling::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneScale {
    /// 2 blocks of one convolution each.
    Toy,
    /// 4 blocks of two convolutions each.
    Small,
    /// 5 blocks of two convolutions, roughly 5M parameters at d = 512.
    Paper,
}

impl BackboneScale {
    pub fn channels(self) -> &'static [usize] {
        match self {
            BackboneScale::Toy => &[16, 32],
            BackboneScale::Small => &[16, 32, 64, 64],
            BackboneScale::Paper => &[32, 64, 128, 256, 512],
        }
    }

    pub fn convs_per_block(self) -> usize {
        match self {
            BackboneScale::Toy => 1,
            BackboneScale::Small | BackboneScale::Paper => 2,
        }
    }

    /// Each block halves both feature-map axes.
    pub fn downsampling(self) -> usize {
        1 << self.channels().len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub embedding_dim: usize,
    pub dropout_rate: f64,
    pub backbone_scale: BackboneScale,
    pub mel: MelConfig,
    /// L2-normalize embeddings before the bilinear head (ablation only).
    pub normalize_embeddings: bool,
    /// Standardize each mel bin with statistics estimated on the training split.
    pub standardize_features: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 512,
            dropout_rate: 0.1,
            backbone_scale: BackboneScale::Paper,
            mel: MelConfig::default(),
            normalize_embeddings: false,
            standardize_features: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        self.mel.validate()?;
        if self.embedding_dim == 0 {
            return Err(Error::config("embedding_dim must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        let down = self.backbone_scale.downsampling();
        if !self.mel.n_mels.is_multiple_of(down) {
            return Err(Error::config(format!(
                "n_mels = {} must be a multiple of {down} for the {:?} backbone",
                self.mel.n_mels, self.backbone_scale
            )));
        }
        Ok(())
    }
}

/// A `d`-dimensional embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f32>,
}

impl Embedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn squared_norm(&self) -> f64 {
        self.vector.iter().map(|v| (*v as f64) * (*v as f64)).sum()
    }
}

/// Snapshot of the learnable `d x d` matrix `W`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearHead {
    dim: usize,
    weights: Vec<f32>,
}

impl BilinearHead {
    pub fn new(dim: usize, weights: Vec<f32>) -> Result<Self> {
        if weights.len() != dim * dim {
            return Err(Error::shape(format!(
                "bilinear head needs {} weights, got {}",
                dim * dim,
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("bilinear head weight".into()));
        }
        Ok(Self { dim, weights })
    }

    pub fn identity(dim: usize) -> Self {
        let mut weights = vec![0.0; dim * dim];
        for i in 0..dim {
            weights[i * dim + i] = 1.0;
        }
        Self { dim, weights }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.weights[row * self.dim + col]
    }

    pub fn is_symmetric(&self, tol: f32) -> bool {
        (0..self.dim).all(|i| (0..i).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= tol))
    }
}

/// `h1^T W h2`, accumulated in f64.
pub fn similarity(h1: &Embedding, h2: &Embedding, head: &BilinearHead) -> Result<f64> {
    let d = head.dim();
    if h1.dim() != d || h2.dim() != d {
        return Err(Error::shape(format!(
            "similarity of {}- and {}-dim embeddings with a {d}-dim head",
            h1.dim(),
            h2.dim()
        )));
    }
    let mut acc = 0.0f64;
    for i in 0..d {
        let row = &head.weights[i * d..(i + 1) * d];
        let wh2: f64 = row
            .iter()
            .zip(&h2.vector)
            .map(|(w, b)| *w as f64 * *b as f64)
            .sum();
        acc += h1.vector[i] as f64 * wh2;
    }
    Ok(acc)
}

/// `S[k][j] = sim(h1[k], h2[j])`.
pub fn similarity_matrix(
    h1: &[Embedding],
    h2: &[Embedding],
    head: &BilinearHead,
) -> Result<Array2<f64>> {
    if h1.len() != h2.len() {
        return Err(Error::shape(format!(
            "{} anchors vs {} candidates",
            h1.len(),
            h2.len()
        )));
    }
    let d = head.dim();
    if let Some(bad) = h1.iter().chain(h2).find(|h| h.dim() != d) {
        return Err(Error::shape(format!(
            "embedding of dim {} with a {d}-dim head",
            bad.dim()
        )));
    }
    let k = h1.len();
    // project candidates once: W h2[j]
    let projected: Vec<Vec<f64>> = h2
        .iter()
        .map(|h| {
            (0..d)
                .map(|i| {
                    head.weights[i * d..(i + 1) * d]
                        .iter()
                        .zip(&h.vector)
                        .map(|(w, b)| *w as f64 * *b as f64)
                        .sum()
                })
                .collect()
        })
        .collect();
    let mut s = Array2::zeros((k, k));
    for (a, ha) in h1.iter().enumerate() {
        for (b, p) in projected.iter().enumerate() {
            s[[a, b]] = ha.vector.iter().zip(p).map(|(x, y)| *x as f64 * y).sum();
        }
    }
    Ok(s)
}

/// Tensor form of the similarity matrix: `H1 W H2^T` for `(K, d)` inputs.
pub fn similarity_matrix_tensor(h1: &Tensor, h2: &Tensor, w: &Tensor) -> Result<Tensor> {
    Ok(h1.matmul(w)?.matmul(&h2.t()?)?)
}

/// The embedding network `f` together with its bilinear head.
#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    store: ParamStore,
    blocks: Vec<Vec<Conv2d>>,
    proj: Linear,
    head: Tensor,
    frontend: MelFrontend,
    stats: Option<FeatureStats>,
}

pub const HEAD_PARAM: &str = "head.w";

impl Encoder {
    pub fn new(config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        Self::with_dtype(config, DType::F32, rng)
    }

    pub fn with_dtype(config: EncoderConfig, dtype: DType, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype);
        let scale = config.backbone_scale;
        let mut blocks = Vec::new();
        let mut c_in = 1;
        for (b, &c_out) in scale.channels().iter().enumerate() {
            let mut convs = Vec::new();
            for j in 0..scale.convs_per_block() {
                let stride = if j == 0 { 2 } else { 1 };
                let src = if j == 0 { c_in } else { c_out };
                convs.push(Conv2d::new(
                    &mut store,
                    &format!("backbone.{b}.{j}"),
                    src,
                    c_out,
                    3,
                    stride,
                    rng,
                )?);
            }
            blocks.push(convs);
            c_in = c_out;
        }
        let flat = c_in * config.mel.n_mels / scale.downsampling();
        let proj = Linear::new(&mut store, "proj", flat, config.embedding_dim, rng)?;
        let head = store.identity(HEAD_PARAM, config.embedding_dim)?;
        let frontend = MelFrontend::new(config.mel.clone())?;
        Ok(Self {
            config,
            store,
            blocks,
            proj,
            head,
            frontend,
            stats: None,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn frontend(&self) -> &MelFrontend {
        &self.frontend
    }

    pub fn feature_stats(&self) -> Option<&FeatureStats> {
        self.stats.as_ref()
    }

    pub fn set_feature_stats(&mut self, stats: Option<FeatureStats>) -> Result<()> {
        if let Some(s) = &stats {
            if s.mean.len() != self.config.mel.n_mels || s.std.len() != self.config.mel.n_mels {
                return Err(Error::shape("feature statistics do not match n_mels"));
            }
        }
        self.stats = stats;
        Ok(())
    }

    pub fn head_tensor(&self) -> &Tensor {
        &self.head
    }

    pub fn head(&self) -> Result<BilinearHead> {
        let w = self
            .head
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        BilinearHead::new(self.config.embedding_dim, w)
    }

    /// Sets `W` (for tests and stubs).
    pub fn set_head(&self, head: &BilinearHead) -> Result<()> {
        if head.dim() != self.config.embedding_dim {
            return Err(Error::shape("head dimension differs from embedding_dim"));
        }
        let t = Tensor::from_vec(head.weights.clone(), (head.dim(), head.dim()), &Device::Cpu)?;
        self.store.copy_from(HEAD_PARAM, &t)
    }

    /// Log-mel features with the optional standardization applied.
    pub fn features(&self, waveform: &[f32]) -> Result<FeatureMap> {
        let mut fm = self.frontend.features(waveform)?;
        if let Some(stats) = &self.stats {
            stats.apply(&mut fm);
        }
        Ok(fm)
    }

    /// Crops (or silence-pads) the frame axis to a multiple of the backbone
    /// down-sampling factor and converts to a `(1, n_mels, frames)` tensor.
    fn feature_tensor(&self, fm: &FeatureMap) -> Result<Tensor> {
        let n_mels = self.config.mel.n_mels;
        if fm.n_mels() != n_mels {
            return Err(Error::shape(format!(
                "feature map has {} mel bins, model expects {n_mels}",
                fm.n_mels()
            )));
        }
        let down = self.config.backbone_scale.downsampling();
        let frames = fm.n_frames();
        let target = if frames >= down {
            frames / down * down
        } else {
            down
        };
        let silence = self.config.mel.silence_level();
        let mut data = Vec::with_capacity(n_mels * target);
        for m in 0..n_mels {
            let pad = match &self.stats {
                Some(s) => (silence - s.mean[m]) / s.std[m],
                None => silence,
            };
            for t in 0..target {
                data.push(if t < frames { fm.values[[m, t]] } else { pad });
            }
        }
        Ok(Tensor::from_vec(data, (1, n_mels, target), &Device::Cpu)?
            .to_dtype(self.store.dtype())?)
    }

    /// Stacks equally shaped feature maps into a `(B, 1, n_mels, frames)` batch.
    pub fn batch_tensor(&self, maps: &[FeatureMap]) -> Result<Tensor> {
        if maps.is_empty() {
            return Err(Error::Empty("empty feature batch".into()));
        }
        let parts = maps
            .iter()
            .map(|m| self.feature_tensor(m))
            .collect::<Result<Vec<_>>>()?;
        let frames = parts[0].dim(2)?;
        if parts.iter().any(|p| p.dim(2).map_or(true, |f| f != frames)) {
            return Err(Error::shape(
                "feature maps in one batch must have equal frame counts",
            ));
        }
        Ok(Tensor::stack(&parts, 0)?)
    }

    /// Forward pass on a `(B, 1, n_mels, frames)` batch. Passing an RNG
    /// selects train mode, where dropout follows every block.
    pub fn forward(&self, x: &Tensor, mut train_rng: Option<&mut Rng>) -> Result<Tensor> {
        let mut h = x.clone();
        for block in &self.blocks {
            for conv in block {
                h = conv.forward(&h)?.relu()?;
            }
            if let Some(rng) = train_rng.as_deref_mut() {
                h = dropout(&h, self.config.dropout_rate, rng)?;
            }
        }
        let pooled = h.mean(D::Minus1)?.flatten_from(1)?;
        let mut out = self.proj.forward(&pooled)?;
        if self.config.normalize_embeddings {
            let norm = out
                .sqr()?
                .sum_keepdim(D::Minus1)?
                .sqrt()?
                .clamp(1e-12, f64::MAX)?;
            out = out.broadcast_div(&norm)?;
        }
        Ok(out)
    }

    /// Embeds one feature map. `train_rng` selects train mode (dropout on).
    pub fn embed(&self, features: &FeatureMap, train_rng: Option<&mut Rng>) -> Result<Embedding> {
        let x = self.feature_tensor(features)?.unsqueeze(0)?;
        let h = self.forward(&x, train_rng)?;
        let vector = h.to_dtype(DType::F32)?.squeeze(0)?.to_vec1::<f32>()?;
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding".into()));
        }
        Ok(Embedding { vector })
    }

    /// Eval-mode embedding of a raw waveform at the model sample rate.
    pub fn embed_waveform(&self, waveform: &[f32]) -> Result<Embedding> {
        self.embed(&self.features(waveform)?, None)
    }

    /// Eval-mode embeddings of equal-length clips, processed in chunks.
    pub fn embed_many(&self, clips: &[Vec<f32>], chunk: usize) -> Result<Vec<Embedding>> {
        let mut out = Vec::with_capacity(clips.len());
        for group in clips.chunks(chunk.max(1)) {
            let maps = group
                .iter()
                .map(|c| self.features(c))
                .collect::<Result<Vec<_>>>()?;
            let h = self.forward(&self.batch_tensor(&maps)?, None)?;
            for row in h.to_dtype(DType::F32)?.to_vec2::<f32>()? {
                out.push(Embedding { vector: row });
            }
        }
        Ok(out)
    }
}
