//! Desk-scale compositional diffusion: noise schedule, task taxonomy, tag
//! prompts, a toy denoiser with a zero-initialized control adapter, a stub
//! codec, training and ancestral sampling.

pub mod codec;
pub mod model;
pub mod prompt;
pub mod sample;
pub mod schedule;
pub mod task;
pub mod train;

pub use codec::{LatentClip, StubCodec};
pub use model::{Adapter, AdapterModel, Denoiser, DenoiserConfig, EpsModel};
pub use prompt::{build_prompt, decode_prompt, parse_tag_list, Prompt};
pub use sample::{ddpm_sample, randn, respaced_steps};
pub use schedule::{noise_with, NoiseSchedule};
pub use task::{classify_task, sample_task, TaskLabel, TaskPolicy, TaskSample};
pub use train::{
    adapter_train, base_train, diffusion_loss, fit, load_componet, sample_diffusion_batch,
    save_componet, score_matching_loss, train_componet, ComponetConfig, ComponetMeta,
    ComponetOutcome, DiffusionBatch, LatentTrack,
};
