//! Ancestral DDPM sampling with optional step respacing.

use candle_core::{DType, Device, Tensor};
use rand_distr::{Distribution, StandardNormal};

use crate::componet::model::EpsModel;
use crate::componet::prompt::Prompt;
use crate::componet::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::sampling::Rng;

/// Standard normal tensor drawn from `rng`.
pub fn randn(shape: &[usize], dtype: DType, rng: &mut Rng) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// `steps` model steps evenly spread over `1..=T`, ascending.
pub fn respaced_steps(max_step: usize, steps: usize) -> Result<Vec<usize>> {
    if steps > max_step {
        return Err(Error::config(format!(
            "{steps} sampling steps exceed the schedule's {max_step}"
        )));
    }
    let mut out: Vec<usize> = (1..=steps)
        .map(|k| ((k * max_step) as f64 / steps as f64).round() as usize)
        .collect();
    out.dedup();
    Ok(out)
}

/// Denoises `prompts.len()` latents of shape `(channels, len)` from pure noise.
///
/// Each step predicts the noise, forms the clean estimate and draws from the
/// Gaussian posterior between consecutive retained steps, with the posterior
/// variance `(1 - a_prev) / (1 - a_t) * (1 - a_t / a_prev)`. The last step
/// returns the clean estimate without noise. `steps = 0` returns the initial
/// noise.
#[allow(clippy::too_many_arguments)]
pub fn ddpm_sample<M: EpsModel>(
    model: &M,
    prompts: &[Prompt],
    w: Option<&Tensor>,
    shape: (usize, usize),
    schedule: &NoiseSchedule,
    steps: usize,
    dtype: DType,
    rng: &mut Rng,
) -> Result<Tensor> {
    let b = prompts.len();
    let taus = respaced_steps(schedule.max_step(), steps)?;
    let mut z = randn(&[b, shape.0, shape.1], dtype, rng)?;
    for k in (0..taus.len()).rev() {
        let t = taus[k];
        let a_t = schedule.alpha_bar(t)?;
        let a_prev = if k == 0 {
            1.0
        } else {
            schedule.alpha_bar(taus[k - 1])?
        };
        let eps = model.predict(&z, prompts, &vec![t; b], w)?;
        let x0 = ((&z - (eps * (1.0 - a_t).sqrt())?)? / a_t.sqrt())?;
        if k == 0 {
            z = x0;
        } else {
            let beta = 1.0 - a_t / a_prev;
            let c0 = a_prev.sqrt() * beta / (1.0 - a_t);
            let ct = (1.0 - beta).sqrt() * (1.0 - a_prev) / (1.0 - a_t);
            let var = (1.0 - a_prev) / (1.0 - a_t) * beta;
            let noise = randn(z.dims(), dtype, rng)?;
            z = (((x0 * c0)? + (&z * ct)?)? + (noise * var.sqrt())?)?;
        }
        let finite = z
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite(format!("sampler state at step {t}")));
        }
    }
    Ok(z)
}
