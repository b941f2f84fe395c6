//! Toy 1-D convolutional denoiser and its zero-initialized control adapter.
//!
//! The denoiser has an input convolution, `levels` encoder layers, a
//! bottleneck and `levels` decoder layers with additive skip connections.
//! Every layer is FiLM-modulated by a conditioning vector built from the
//! diffusion step and the prompt. The adapter is a trainable copy of the
//! input convolution and encoder layers, fed with `z_t + conv_in(w)`, whose
//! features are added to the frozen encoder features through zero-initialized
//! 1x1 convolutions.

use candle_core::{DType, Device, Module, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::componet::prompt::Prompt;
use crate::error::{Error, Result};
use crate::nn::{timestep_embedding, Conv1d, Linear, ParamStore};
use crate::sampling::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub width: usize,
    /// Encoder (and decoder) layer count.
    pub levels: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
    /// Tags in the vocabulary; the separator adds one token.
    pub n_tags: usize,
    pub kernel: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 1,
            width: 32,
            levels: 3,
            cond_dim: 32,
            time_dim: 32,
            n_tags: 4,
            kernel: 3,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 || self.width == 0 || self.levels == 0 || self.cond_dim == 0 {
            return Err(Error::config("denoiser sizes must be positive"));
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::config("time_dim must be even and at least 2"));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::config("kernel must be odd"));
        }
        Ok(())
    }
}

/// Noise predictors usable by the trainer and the sampler.
pub trait EpsModel {
    /// Predicts the noise in `z_t` (shaped `(B, C, L)`); `w` is the conditioning latent.
    fn predict(
        &self,
        z_t: &Tensor,
        prompts: &[Prompt],
        t: &[usize],
        w: Option<&Tensor>,
    ) -> Result<Tensor>;
}

#[derive(Debug, Clone)]
struct Film {
    proj: Linear,
    width: usize,
}

impl Film {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cond_dim: usize,
        width: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(store, name, cond_dim, 2 * width, rng)?,
            width,
        })
    }

    fn apply(&self, h: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let p = self.proj.forward(cond)?.unsqueeze(D::Minus1)?;
        let scale = (p.narrow(1, 0, self.width)? + 1.0)?;
        let shift = p.narrow(1, self.width, self.width)?;
        Ok(h.broadcast_mul(&scale)?.broadcast_add(&shift)?)
    }
}

#[derive(Debug, Clone)]
struct Layer {
    conv: Conv1d,
    film: Film,
}

impl Layer {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &DenoiserConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv1d::new(
                store,
                &format!("{name}.conv"),
                cfg.width,
                cfg.width,
                cfg.kernel,
                rng,
            )?,
            film: Film::new(store, &format!("{name}.film"), cfg.cond_dim, cfg.width, rng)?,
        })
    }

    fn forward(&self, h: &Tensor, cond: &Tensor) -> Result<Tensor> {
        Ok(self.film.apply(&self.conv.forward(h)?, cond)?.silu()?)
    }
}

/// The base noise predictor.
#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    store: ParamStore,
    time_1: Linear,
    time_2: Linear,
    tokens: Tensor,
    sides: Tensor,
    input: Conv1d,
    encoder: Vec<Layer>,
    middle: Layer,
    decoder: Vec<Layer>,
    output: Conv1d,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, dtype: DType, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype);
        let c = &config;
        let time_1 = Linear::new(&mut store, "time.1", c.time_dim, c.cond_dim, rng)?;
        let time_2 = Linear::new(&mut store, "time.2", c.cond_dim, c.cond_dim, rng)?;
        let tokens = store.uniform("prompt.tokens", &[c.n_tags + 1, c.cond_dim], 1.0, rng)?;
        let sides = store.uniform("prompt.sides", &[2, c.cond_dim], 1.0, rng)?;
        let input = Conv1d::new(
            &mut store,
            "input",
            c.latent_channels,
            c.width,
            c.kernel,
            rng,
        )?;
        let encoder = (0..c.levels)
            .map(|i| Layer::new(&mut store, &format!("enc.{i}"), c, rng))
            .collect::<Result<Vec<_>>>()?;
        let middle = Layer::new(&mut store, "mid", c, rng)?;
        let decoder = (0..c.levels)
            .map(|i| Layer::new(&mut store, &format!("dec.{i}"), c, rng))
            .collect::<Result<Vec<_>>>()?;
        let output = Conv1d::new(
            &mut store,
            "output",
            c.width,
            c.latent_channels,
            c.kernel,
            rng,
        )?;
        Ok(Self {
            config,
            store,
            time_1,
            time_2,
            tokens,
            sides,
            input,
            encoder,
            middle,
            decoder,
            output,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Conditioning vectors `(B, cond_dim)` from steps and prompts.
    ///
    /// The prompt part is the mean of token embeddings, each shifted by a
    /// learned embedding of its side of the separator.
    pub fn conditioning(&self, prompts: &[Prompt], t: &[usize]) -> Result<Tensor> {
        if prompts.len() != t.len() {
            return Err(Error::shape(format!(
                "{} prompts for {} steps",
                prompts.len(),
                t.len()
            )));
        }
        let v = self.config.n_tags + 1;
        let b = prompts.len();
        let mut tok_w = vec![0f64; b * v];
        let mut side_w = vec![0f64; b * 2];
        for (r, p) in prompts.iter().enumerate() {
            p.validate()?;
            if p.n_tags != self.config.n_tags {
                return Err(Error::Prompt(format!(
                    "prompt over {} tags, model expects {}",
                    p.n_tags, self.config.n_tags
                )));
            }
            let sep = p.sep_position().expect("validated");
            let n = p.tokens.len() as f64;
            for (i, tok) in p.tokens.iter().enumerate() {
                tok_w[r * v + tok] += 1.0 / n;
                let side = if i <= sep { 0 } else { 1 };
                side_w[r * 2 + side] += 1.0 / n;
            }
        }
        let dt = self.dtype();
        let tok_w = Tensor::from_vec(tok_w, (b, v), &Device::Cpu)?.to_dtype(dt)?;
        let side_w = Tensor::from_vec(side_w, (b, 2), &Device::Cpu)?.to_dtype(dt)?;
        let prompt = (tok_w.matmul(&self.tokens)? + side_w.matmul(&self.sides)?)?;
        let te = timestep_embedding(t, self.config.time_dim, dt)?;
        let time = self.time_2.forward(&self.time_1.forward(&te)?.silu()?)?;
        Ok((time + prompt)?)
    }

    fn check_input(&self, z: &Tensor) -> Result<()> {
        let (_, c, _) = z.dims3()?;
        if c != self.config.latent_channels {
            return Err(Error::shape(format!(
                "latent has {c} channels, model expects {}",
                self.config.latent_channels
            )));
        }
        Ok(())
    }

    /// Per-layer encoder features.
    fn encode(&self, z_t: &Tensor, cond: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = self.input.forward(z_t)?;
        let mut feats = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            h = layer.forward(&h, cond)?;
            feats.push(h.clone());
        }
        Ok(feats)
    }

    /// Bottleneck and decoder over (possibly fused) encoder features.
    fn decode(&self, feats: &[Tensor], cond: &Tensor) -> Result<Tensor> {
        let mut h = self
            .middle
            .forward(feats.last().expect("levels >= 1"), cond)?;
        for (layer, skip) in self.decoder.iter().zip(feats.iter().rev()) {
            h = layer.forward(&(h + skip)?, cond)?;
        }
        Ok(self.output.forward(&h)?)
    }

    pub fn forward(&self, z_t: &Tensor, prompts: &[Prompt], t: &[usize]) -> Result<Tensor> {
        self.check_input(z_t)?;
        let cond = self.conditioning(prompts, t)?;
        self.decode(&self.encode(z_t, &cond)?, &cond)
    }
}

impl EpsModel for Denoiser {
    fn predict(
        &self,
        z_t: &Tensor,
        prompts: &[Prompt],
        t: &[usize],
        _w: Option<&Tensor>,
    ) -> Result<Tensor> {
        self.forward(z_t, prompts, t)
    }
}

/// Trainable control branch.
#[derive(Debug, Clone)]
pub struct Adapter {
    store: ParamStore,
    conv_in: Conv1d,
    input: Conv1d,
    encoder: Vec<Layer>,
    fuse: Vec<Conv1d>,
}

impl Adapter {
    /// Copies the base input and encoder weights; `conv_in` and the fusion
    /// convolutions start at zero.
    pub fn from_base(base: &Denoiser, rng: &mut Rng) -> Result<Self> {
        let c = base.config();
        let mut store = ParamStore::new(base.dtype());
        let conv_in = Conv1d::zeroed(
            &mut store,
            "conv_in",
            c.latent_channels,
            c.latent_channels,
            1,
        )?;
        let input = Conv1d::new(
            &mut store,
            "input",
            c.latent_channels,
            c.width,
            c.kernel,
            rng,
        )?;
        let encoder = (0..c.levels)
            .map(|i| Layer::new(&mut store, &format!("enc.{i}"), c, rng))
            .collect::<Result<Vec<_>>>()?;
        let fuse = (0..c.levels)
            .map(|i| Conv1d::zeroed(&mut store, &format!("fuse.{i}"), c.width, c.width, 1))
            .collect::<Result<Vec<_>>>()?;
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for name in names {
            if let Some(src) = base.params().get(&name) {
                store.copy_from(&name, src.as_tensor())?;
            }
        }
        Ok(Self {
            store,
            conv_in,
            input,
            encoder,
            fuse,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    fn features(&self, z_t: &Tensor, w: &Tensor, cond: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = self.input.forward(&(z_t + self.conv_in.forward(w)?)?)?;
        let mut feats = Vec::with_capacity(self.encoder.len());
        for (layer, fuse) in self.encoder.iter().zip(&self.fuse) {
            h = layer.forward(&h, cond)?;
            feats.push(fuse.forward(&h)?);
        }
        Ok(feats)
    }
}

/// Frozen base denoiser plus control adapter.
#[derive(Debug, Clone)]
pub struct AdapterModel {
    pub base: Denoiser,
    pub adapter: Adapter,
}

impl AdapterModel {
    pub fn new(base: Denoiser, rng: &mut Rng) -> Result<Self> {
        let adapter = Adapter::from_base(&base, rng)?;
        Ok(Self { base, adapter })
    }

    /// Noise prediction conditioned on the latent `w` (same shape as `z_t`).
    pub fn forward(
        &self,
        z_t: &Tensor,
        prompts: &[Prompt],
        t: &[usize],
        w: &Tensor,
    ) -> Result<Tensor> {
        self.base.check_input(z_t)?;
        if z_t.dims() != w.dims() {
            return Err(Error::shape(format!(
                "conditioning latent {:?} differs from z_t {:?}",
                w.dims(),
                z_t.dims()
            )));
        }
        let cond = self.base.conditioning(prompts, t)?;
        let base_feats = self.base.encode(z_t, &cond)?;
        let ctrl = self.adapter.features(z_t, w, &cond)?;
        let fused = base_feats
            .iter()
            .zip(&ctrl)
            .map(|(e, c)| Ok((e + c)?))
            .collect::<Result<Vec<_>>>()?;
        self.base.decode(&fused, &cond)
    }
}

impl EpsModel for AdapterModel {
    fn predict(
        &self,
        z_t: &Tensor,
        prompts: &[Prompt],
        t: &[usize],
        w: Option<&Tensor>,
    ) -> Result<Tensor> {
        match w {
            Some(w) => self.forward(z_t, prompts, t, w),
            None => self.forward(z_t, prompts, t, &z_t.zeros_like()?),
        }
    }
}
