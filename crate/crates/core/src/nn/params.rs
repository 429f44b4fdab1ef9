use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    Normal { std: f64 },
    Uniform { bound: f64 },
    /// Identity for 2-D shapes (ones on the main diagonal).
    Identity,
}

/// Named trainable parameters with seeded initialization.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("params", &self.vars.len())
            .field("dtype", &self.dtype)
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Register a new parameter and return its tracked tensor.
    pub fn var(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::internal(format!("parameter `{name}` registered twice")));
        }
        let numel: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; numel],
            Init::Const(c) => vec![c; numel],
            Init::Normal { std } => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::param(e.to_string()))?;
                (0..numel).map(|_| dist.sample(&mut self.rng)).collect()
            }
            Init::Uniform { bound } => (0..numel).map(|_| self.rng.random_range(-bound..=bound)).collect(),
            Init::Identity => {
                if shape.len() != 2 {
                    return Err(Error::param("identity init needs a 2-D shape"));
                }
                let mut v = vec![0.0; numel];
                (0..shape[0].min(shape[1])).for_each(|i| v[i * shape[1] + i] = 1.0);
                v
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrite a parameter in place; every module holding it sees the change.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::param(format!("unknown parameter `{name}`")))?;
        if var.shape() != value.shape() {
            return Err(Error::param(format!(
                "shape mismatch for `{name}`: {:?} vs {:?}",
                var.shape(),
                value.shape()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    pub fn set_from_f64(&self, name: &str, values: Vec<f64>) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::param(format!("unknown parameter `{name}`")))?;
        let t = Tensor::from_vec(values, var.shape(), &self.device)?;
        self.set(name, &t)
    }

    /// Flattened values of a parameter as f64.
    pub fn values(&self, name: &str) -> Result<Vec<f64>> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::param(format!("unknown parameter `{name}`")))?;
        Ok(var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1()?)
    }
}
