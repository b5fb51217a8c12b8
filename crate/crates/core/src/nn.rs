//! Parameter storage and the handful of differentiable building blocks the
//! models share. Everything runs on the CPU device and in whatever float
//! dtype the owning model was built with.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::rngs::StdRng;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEVICE: Device = Device::Cpu;

/// Float precision a model is built in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Named trainable tensors in a deterministic (sorted) order.
///
/// A frozen store hands out detached tensors, so gradients still flow
/// through computations that use them but never reach the parameters.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    frozen: bool,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            frozen: false,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<()> {
        let t = Tensor::from_vec(values, shape, &DEVICE)?.to_dtype(self.dtype)?;
        self.vars.insert(name.to_owned(), Var::from_tensor(&t)?);
        Ok(())
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut StdRng) -> Result<()> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
        let values = (0..n).map(|_| dist.sample(rng)).collect();
        self.insert(name, values, shape)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut StdRng) -> Result<()> {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    /// Registers `{prefix}.weight` (`out x in`, Glorot-uniform) and `{prefix}.bias`.
    pub fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize, rng: &mut StdRng) -> Result<()> {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        self.uniform(&format!("{prefix}.weight"), &[d_out, d_in], bound, rng)?;
        self.constant(&format!("{prefix}.bias"), &[d_out], 0.0)
    }

    /// Registers a conv kernel `{prefix}.weight` of shape `[out, in, k...]` and its bias.
    pub fn conv(&mut self, prefix: &str, shape: &[usize], rng: &mut StdRng) -> Result<()> {
        let fan_in: usize = shape[1..].iter().product();
        let bound = (6.0 / fan_in as f64).sqrt();
        self.uniform(&format!("{prefix}.weight"), shape, bound, rng)?;
        self.constant(&format!("{prefix}.bias"), &[shape[0]], 0.0)
    }

    pub fn layer_norm(&mut self, prefix: &str, dim: usize) -> Result<()> {
        self.constant(&format!("{prefix}.gamma"), &[dim], 1.0)?;
        self.constant(&format!("{prefix}.beta"), &[dim], 0.0)
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        Ok(if self.frozen {
            var.as_tensor().detach()
        } else {
            var.as_tensor().clone()
        })
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Deep copy of the current values.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    pub fn restore(&self, snapshot: &BTreeMap<String, Tensor>) -> Result<()> {
        for (k, t) in snapshot {
            self.set(k, t)?;
        }
        Ok(())
    }

    /// SHA-256 over parameter names and values, hex encoded.
    pub fn checksum(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, var) in &self.vars {
            hasher.update(name.as_bytes());
            let values = var.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            for v in values {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: HashMap<String, Tensor> = self
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    /// Overwrites every parameter with the archive's value; names and shapes
    /// must match exactly.
    pub fn load_values(&self, path: &Path) -> Result<()> {
        let loaded = candle_core::safetensors::load(path, &DEVICE)?;
        let ck = |message: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        if loaded.len() != self.vars.len() {
            return Err(ck(format!(
                "archive holds {} tensors, model expects {}",
                loaded.len(),
                self.vars.len()
            )));
        }
        for (name, var) in &self.vars {
            let t = loaded
                .get(name)
                .ok_or_else(|| ck(format!("missing tensor {name}")))?;
            if t.dims() != var.dims() {
                return Err(ck(format!("tensor {name} has shape {:?}, expected {:?}", t.dims(), var.dims())));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

pub fn linear(store: &ParamStore, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let w = store.get(&format!("{prefix}.weight"))?;
    let b = store.get(&format!("{prefix}.bias"))?;
    Ok(x.matmul(&w.t()?)?.broadcast_add(&b)?)
}

/// Layer normalisation over the last dimension, built from primitive ops so
/// that it is differentiable.
pub fn layer_norm(store: &ParamStore, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let gamma = store.get(&format!("{prefix}.gamma"))?;
    let beta = store.get(&format!("{prefix}.beta"))?;
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
    Ok(normed.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
}

/// `x: (C_in, L)` -> `(C_out, L)` with "same" zero padding.
///
/// The padding is explicit because candle's conv backward underflows when
/// the sequence is shorter than the kernel and padding is left to the op.
pub fn conv1d_same(store: &ParamStore, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let w = store.get(&format!("{prefix}.weight"))?;
    let b = store.get(&format!("{prefix}.bias"))?;
    let k = w.dim(2)?;
    let padded = x.pad_with_zeros(1, k / 2, k / 2)?;
    let y = padded.unsqueeze(0)?.conv1d(&w, 0, 1, 1, 1)?.squeeze(0)?;
    Ok(y.broadcast_add(&b.unsqueeze(1)?)?)
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// One LSTM direction over pre-projected inputs `(T, 4H)`; gate order i, f, g, o.
pub fn lstm_direction(input_proj: &Tensor, w_hh: &Tensor, reverse: bool) -> Result<Tensor> {
    let (steps, four_h) = input_proj.dims2()?;
    let hidden = four_h / 4;
    let dtype = input_proj.dtype();
    let mut h = Tensor::zeros((1, hidden), dtype, &DEVICE)?;
    let mut c = Tensor::zeros((1, hidden), dtype, &DEVICE)?;
    let w_hh_t = w_hh.t()?;
    let mut outputs = vec![None; steps];
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..steps).rev())
    } else {
        Box::new(0..steps)
    };
    for t in order {
        let z = (input_proj.narrow(0, t, 1)? + h.matmul(&w_hh_t)?)?;
        let i = candle_nn::ops::sigmoid(&z.narrow(1, 0, hidden)?)?;
        let f = candle_nn::ops::sigmoid(&z.narrow(1, hidden, hidden)?)?;
        let g = z.narrow(1, 2 * hidden, hidden)?.tanh()?;
        let o = candle_nn::ops::sigmoid(&z.narrow(1, 3 * hidden, hidden)?)?;
        c = ((f * &c)? + (i * g)?)?;
        h = (o * c.tanh()?)?;
        outputs[t] = Some(h.clone());
    }
    let outputs: Vec<Tensor> = outputs.into_iter().map(|o| o.expect("every step visited")).collect();
    Ok(Tensor::cat(&outputs, 0)?)
}

/// Inverted dropout with a caller-owned generator; identity when `rng` is
/// `None` or `p == 0`.
pub fn dropout(x: &Tensor, p: f64, rng: Option<&mut StdRng>) -> Result<Tensor> {
    let Some(rng) = rng else { return Ok(x.clone()) };
    if p <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - p;
    let mask: Vec<f64> = (0..x.elem_count())
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), &DEVICE)?.to_dtype(x.dtype())?;
    Ok((x * mask)?)
}

/// Standard sinusoidal position table `(len, dim)`.
pub fn positional_encoding(len: usize, dim: usize, dtype: DType) -> Result<Tensor> {
    let mut table = vec![0.0f64; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let rate = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * rate;
            table[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Ok(Tensor::from_vec(table, (len, dim), &DEVICE)?.to_dtype(dtype)?)
}

/// Reads a scalar tensor as `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn to_vec_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn frozen_store_detaches() {
        let mut rng = StdRng::seed_from_u64(0);
        let mut store = ParamStore::new(DType::F64);
        store.normal("w", &[3], 1.0, &mut rng).unwrap();
        let x = Var::new(&[1.0f64, 2.0, 3.0], &DEVICE).unwrap();
        store.set_frozen(true);
        let loss = (store.get("w").unwrap() * x.as_tensor()).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert!(grads.get(store.var("w").unwrap().as_tensor()).is_none());
        assert!(grads.get(x.as_tensor()).is_some());
    }

    #[test]
    fn softplus_matches_closed_form() {
        let x = Tensor::new(&[-30.0f64, -1.0, 0.0, 2.0, 40.0], &DEVICE).unwrap();
        let y = to_vec_f64(&softplus(&x).unwrap()).unwrap();
        for (xi, yi) in [-30.0f64, -1.0, 0.0, 2.0, 40.0].iter().zip(y) {
            let expect = if *xi > 0.0 { xi + (-xi).exp().ln_1p() } else { xi.exp().ln_1p() };
            assert!((yi - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn checksum_tracks_values() {
        let mut rng = StdRng::seed_from_u64(1);
        let mut store = ParamStore::new(DType::F32);
        store.linear("fc", 2, 3, &mut rng).unwrap();
        let before = store.checksum().unwrap();
        assert_eq!(before, store.checksum().unwrap());
        store.set("fc.bias", &Tensor::ones(3, DType::F32, &DEVICE).unwrap()).unwrap();
        assert_ne!(before, store.checksum().unwrap());
    }

    #[test]
    fn save_load_restores_values() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = StdRng::seed_from_u64(2);
        let mut a = ParamStore::new(DType::F32);
        a.linear("fc", 4, 2, &mut rng).unwrap();
        a.save(&dir.path().join("p.safetensors")).unwrap();
        let mut b = ParamStore::new(DType::F32);
        b.linear("fc", 4, 2, &mut StdRng::seed_from_u64(3)).unwrap();
        b.load_values(&dir.path().join("p.safetensors")).unwrap();
        assert_eq!(a.checksum().unwrap(), b.checksum().unwrap());
    }
}
