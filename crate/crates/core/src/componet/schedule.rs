//! Cosine noise schedule and the forward noising process.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_STEPS: usize = 100;
const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

/// Cumulative signal fractions `alpha_bar[0..=T]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine schedule with `steps` noising steps after the near-identity step 0.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("the noise schedule needs at least one step"));
        }
        let n = steps + 1;
        let f = |i: usize| {
            let x = (i as f64 / n as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
            (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
        };
        let mut alpha_bar = Vec::with_capacity(n);
        let mut acc = 1.0;
        for i in 0..n {
            let beta = (1.0 - f(i + 1) / f(i)).min(MAX_BETA);
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Self::from_alpha_bar(alpha_bar)
    }

    /// Validates a custom schedule: values in (0, 1], strictly decreasing.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::config("a schedule needs at least two entries"));
        }
        if alpha_bar.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(Error::config("alpha_bar values must lie in (0, 1]"));
        }
        if alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::config("alpha_bar must be strictly decreasing"));
        }
        Ok(Self { alpha_bar })
    }

    /// The largest step index `T`.
    pub fn max_step(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| self.out_of_range(t))
    }

    pub fn values(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Signal-to-noise ratio `alpha_bar / (1 - alpha_bar)`.
    pub fn snr(&self, t: usize) -> Result<f64> {
        let a = self.alpha_bar(t)?;
        Ok(a / (1.0 - a))
    }

    fn out_of_range(&self, t: usize) -> Error {
        Error::config(format!("step {t} outside [0, {}]", self.max_step()))
    }

    /// `sqrt(alpha_bar[t]) z + sqrt(1 - alpha_bar[t]) eps`.
    pub fn forward_noise(&self, z: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        noise_with(z, self.alpha_bar(t)?, eps)
    }

    /// Batched forward process on `(B, ...)` tensors with one step per row.
    pub fn forward_noise_tensor(&self, z: &Tensor, t: &[usize], eps: &Tensor) -> Result<Tensor> {
        if z.dims() != eps.dims() {
            return Err(Error::shape(format!(
                "latent {:?} vs noise {:?}",
                z.dims(),
                eps.dims()
            )));
        }
        if z.dim(0)? != t.len() {
            return Err(Error::shape("one step per batch row is required"));
        }
        let mut shape = vec![t.len()];
        shape.extend(std::iter::repeat_n(1, z.rank() - 1));
        let a = t
            .iter()
            .map(|&s| self.alpha_bar(s))
            .collect::<Result<Vec<f64>>>()?;
        let sa: Vec<f64> = a.iter().map(|v| v.sqrt()).collect();
        let sn: Vec<f64> = a.iter().map(|v| (1.0 - v).sqrt()).collect();
        let sa = Tensor::from_vec(sa, shape.as_slice(), &Device::Cpu)?.to_dtype(z.dtype())?;
        let sn = Tensor::from_vec(sn, shape.as_slice(), &Device::Cpu)?.to_dtype(z.dtype())?;
        Ok((z.broadcast_mul(&sa)? + eps.broadcast_mul(&sn)?)?)
    }
}

impl TryFrom<Vec<f64>> for NoiseSchedule {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::from_alpha_bar(v)
    }
}

impl From<NoiseSchedule> for Vec<f64> {
    fn from(s: NoiseSchedule) -> Self {
        s.alpha_bar
    }
}

/// Forward process at an explicit signal fraction in `[0, 1]`.
pub fn noise_with(z: &[f64], alpha_bar: f64, eps: &[f64]) -> Result<Vec<f64>> {
    if z.len() != eps.len() {
        return Err(Error::shape(format!(
            "latent of {} values vs noise of {}",
            z.len(),
            eps.len()
        )));
    }
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(Error::config(format!(
            "alpha_bar {alpha_bar} outside [0, 1]"
        )));
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(z.iter().zip(eps).map(|(z, e)| a * z + b * e).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_invariants() {
        let s = NoiseSchedule::cosine(DEFAULT_STEPS).unwrap();
        assert_eq!(s.max_step(), 100);
        let a0 = s.alpha_bar(0).unwrap();
        assert!(a0 < 1.0 && a0 > 0.999);
        assert!(s.alpha_bar(100).unwrap() < 1e-3);
        for t in 1..=100 {
            assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
            assert!(s.snr(t).unwrap() < s.snr(t - 1).unwrap());
        }
        assert!(s.alpha_bar(101).is_err());
    }

    #[test]
    fn forward_examples() {
        assert_eq!(
            noise_with(&[2.0, -1.0], 1.0, &[5.0, 5.0]).unwrap(),
            vec![2.0, -1.0]
        );
        assert_eq!(
            noise_with(&[2.0, -1.0], 0.0, &[5.0, 4.0]).unwrap(),
            vec![5.0, 4.0]
        );
        let v = noise_with(&[2.0], 0.25, &[1.0]).unwrap()[0];
        assert!((v - (0.5 * 2.0 + 0.75f64.sqrt())).abs() < 1e-12);
        assert!((v - 1.866025).abs() < 1e-6);
        assert!(noise_with(&[1.0], 0.5, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn tensor_form_matches_slices() {
        let s = NoiseSchedule::cosine(10).unwrap();
        let z = Tensor::new(&[[0.5f64, -1.0], [2.0, 0.0]], &Device::Cpu).unwrap();
        let e = Tensor::new(&[[1.0f64, 0.3], [-0.2, 0.7]], &Device::Cpu).unwrap();
        let out = s
            .forward_noise_tensor(&z, &[3, 9], &e)
            .unwrap()
            .to_vec2::<f64>()
            .unwrap();
        assert_eq!(
            out[0],
            s.forward_noise(&[0.5, -1.0], 3, &[1.0, 0.3]).unwrap()
        );
        assert_eq!(
            out[1],
            s.forward_noise(&[2.0, 0.0], 9, &[-0.2, 0.7]).unwrap()
        );
    }

    #[test]
    fn custom_schedules_are_checked() {
        assert!(NoiseSchedule::from_alpha_bar(vec![0.9, 0.95]).is_err());
        assert!(NoiseSchedule::from_alpha_bar(vec![1.0, 0.0]).is_err());
        assert!(NoiseSchedule::from_alpha_bar(vec![1.0, 0.5]).is_ok());
    }
}
