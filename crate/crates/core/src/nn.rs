//! Small building blocks on top of candle: a named parameter store with
//! seeded initialization, plus the few layers the models need.

use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Module, Tensor, Var, D};
use rand::Rng as _;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::sampling::Rng;

/// Named trainable tensors, iterated in name order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            dtype,
            vars: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &Device::Cpu
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<Tensor> {
        let var = Var::from_tensor(&value.to_dtype(self.dtype)?)?;
        let t = var.as_tensor().clone();
        if self.vars.insert(name.to_string(), var).is_some() {
            return Err(Error::config(format!("parameter `{name}` defined twice")));
        }
        Ok(t)
    }

    pub fn uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        bound: f64,
        rng: &mut Rng,
    ) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert(name, Tensor::from_vec(data, shape, &Device::Cpu)?)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        self.insert(name, Tensor::zeros(shape, self.dtype, &Device::Cpu)?)
    }

    pub fn identity(&mut self, name: &str, n: usize) -> Result<Tensor> {
        self.insert(name, Tensor::eye(n, self.dtype, &Device::Cpu)?)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    /// Vars whose names start with `prefix`.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites every parameter from `values`; names and shapes must match exactly.
    pub fn assign(&self, values: &HashMap<String, Tensor>) -> Result<()> {
        if values.len() != self.vars.len() {
            return Err(Error::shape(format!(
                "expected {} parameters, found {}",
                self.vars.len(),
                values.len()
            )));
        }
        for (name, var) in &self.vars {
            let v = values
                .get(name)
                .ok_or_else(|| Error::shape(format!("missing parameter `{name}`")))?;
            if v.dims() != var.dims() {
                return Err(Error::shape(format!(
                    "parameter `{name}`: stored {:?}, model {:?}",
                    v.dims(),
                    var.dims()
                )));
            }
            var.set(&v.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Copies the values of `src` (same name and shape) into this store.
    pub fn copy_from(&self, name: &str, src: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::shape(format!("missing parameter `{name}`")))?;
        var.set(&src.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in &self.vars {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let values = var
                .as_tensor()
                .flatten_all()?
                .to_dtype(DType::F64)?
                .to_vec1::<f64>()?;
            for v in values {
                h.update(v.to_le_bytes());
            }
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    /// Kaiming-uniform weights, small uniform bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let fan_in = (c_in * k * k) as f64;
        let weight = store.uniform(
            &format!("{name}.weight"),
            &[c_out, c_in, k, k],
            (6.0 / fan_in).sqrt(),
            rng,
        )?;
        let bias = store.uniform(&format!("{name}.bias"), &[c_out], 1.0 / fan_in.sqrt(), rng)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding: k / 2,
        })
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let c = self.bias.dim(0)?;
        y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)
    }
}

/// 1-D convolution over `(batch, channels, length)` with "same" padding.
#[derive(Debug, Clone)]
pub struct Conv1d {
    weight: Tensor,
    bias: Tensor,
    padding: usize,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let fan_in = (c_in * k) as f64;
        let weight = store.uniform(
            &format!("{name}.weight"),
            &[c_out, c_in, k],
            (3.0 / fan_in).sqrt(),
            rng,
        )?;
        let bias = store.uniform(&format!("{name}.bias"), &[c_out], 1.0 / fan_in.sqrt(), rng)?;
        Ok(Self {
            weight,
            bias,
            padding: k / 2,
        })
    }

    /// All-zero weights and bias.
    pub fn zeroed(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
    ) -> Result<Self> {
        let weight = store.zeros(&format!("{name}.weight"), &[c_out, c_in, k])?;
        let bias = store.zeros(&format!("{name}.bias"), &[c_out])?;
        Ok(Self {
            weight,
            bias,
            padding: k / 2,
        })
    }
}

impl Module for Conv1d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (c_out, c_in, k) = self.weight.dims3()?;
        let x = x
            .pad_with_zeros(D::Minus1, self.padding, self.padding)?
            .unsqueeze(2)?;
        let y = x
            .conv2d(&self.weight.reshape((c_out, c_in, 1, k))?, 0, 1, 1, 1)?
            .squeeze(2)?;
        y.broadcast_add(&self.bias.reshape((1, c_out, 1))?)
    }
}

/// Affine map `x W^T + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = store.uniform(&format!("{name}.weight"), &[d_out, d_in], bound, rng)?;
        let bias = store.uniform(&format!("{name}.bias"), &[d_out], bound, rng)?;
        Ok(Self { weight, bias })
    }

    pub fn zeroed(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let weight = store.zeros(&format!("{name}.weight"), &[d_out, d_in])?;
        let bias = store.zeros(&format!("{name}.bias"), &[d_out])?;
        Ok(Self { weight, bias })
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)
    }
}

/// Inverted dropout with a mask drawn from `rng`.
pub fn dropout(x: &Tensor, rate: f64, rng: &mut Rng) -> Result<Tensor> {
    if rate <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let mask: Vec<f32> = (0..x.elem_count())
        .map(|_| {
            if rng.random::<f64>() < keep {
                scale as f32
            } else {
                0.0
            }
        })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok(x.mul(&mask)?)
}

/// Sinusoidal embedding of integer steps, shaped `(batch, dim)`.
pub fn timestep_embedding(steps: &[usize], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(steps.len() * dim);
    for &t in steps {
        for i in 0..dim {
            let j = i % half.max(1);
            let freq = (-(10_000f64.ln()) * j as f64 / half.max(1) as f64).exp();
            let arg = t as f64 * freq;
            data.push(if i < half { arg.sin() } else { arg.cos() });
        }
    }
    Ok(Tensor::from_vec(data, (steps.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Sum of squares over all but the first dimension.
pub fn sum_sq_per_row(x: &Tensor) -> Result<Tensor> {
    let b = x.dim(0)?;
    Ok(x.sqr()?.reshape((b, ()))?.sum(D::Minus1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn conv1d_kernel_gradient_matches_finite_differences_for_batches() {
        let mut s = ParamStore::new(DType::F64);
        let mut rng = Rng::seed_from_u64(3);
        let conv = Conv1d::new(&mut s, "c", 2, 3, 3, &mut rng).unwrap();
        let x = Tensor::from_vec(
            (0..48).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect(),
            (3, 2, 8),
            &Device::Cpu,
        )
        .unwrap();
        let g = Tensor::from_vec(
            (0..72).map(|i| ((i * 5 % 13) as f64 - 6.0) / 6.0).collect(),
            (3, 3, 8),
            &Device::Cpu,
        )
        .unwrap();
        let loss = || (conv.forward(&x).unwrap() * &g).unwrap().sum_all().unwrap();
        let w = s.get("c.weight").unwrap();
        let grads = loss().backward().unwrap();
        let analytic = grads
            .get(w)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let base = w
            .as_tensor()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        for i in 0..base.len() {
            let mut v = base.clone();
            v[i] += 1e-6;
            w.set(&Tensor::from_vec(v.clone(), (3, 2, 3), &Device::Cpu).unwrap())
                .unwrap();
            let up = loss().to_scalar::<f64>().unwrap();
            v[i] -= 2e-6;
            w.set(&Tensor::from_vec(v, (3, 2, 3), &Device::Cpu).unwrap())
                .unwrap();
            let down = loss().to_scalar::<f64>().unwrap();
            w.set(&Tensor::from_vec(base.clone(), (3, 2, 3), &Device::Cpu).unwrap())
                .unwrap();
            assert!(
                (analytic[i] - (up - down) / 2e-6).abs() < 1e-6,
                "coordinate {i}"
            );
        }
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let build = || {
            let mut s = ParamStore::new(DType::F32);
            let mut rng = Rng::seed_from_u64(1);
            Conv2d::new(&mut s, "c", 1, 4, 3, 2, &mut rng).unwrap();
            Linear::new(&mut s, "l", 8, 2, &mut rng).unwrap();
            s.checksum().unwrap()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn assign_checks_names_and_shapes() {
        let mut a = ParamStore::new(DType::F32);
        a.zeros("x", &[2, 2]).unwrap();
        let mut good = HashMap::new();
        good.insert(
            "x".to_string(),
            Tensor::ones((2, 2), DType::F32, &Device::Cpu).unwrap(),
        );
        a.assign(&good).unwrap();
        let mut bad = HashMap::new();
        bad.insert(
            "x".to_string(),
            Tensor::ones((3, 2), DType::F32, &Device::Cpu).unwrap(),
        );
        assert!(a.assign(&bad).is_err());
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let x = Tensor::ones((3, 4), DType::F32, &Device::Cpu).unwrap();
        let mut rng = Rng::seed_from_u64(0);
        let y = dropout(&x, 0.0, &mut rng).unwrap();
        assert_eq!(y.to_vec2::<f32>().unwrap(), x.to_vec2::<f32>().unwrap());
        let z = dropout(&x, 0.5, &mut rng)
            .unwrap()
            .to_vec2::<f32>()
            .unwrap();
        assert!(z.iter().flatten().all(|v| *v == 0.0 || *v == 2.0));
    }
}
