use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{self, SeededRng};

/// Parameter initialization.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    Normal(f64),
}

struct Inner {
    vars: BTreeMap<String, Var>,
    rng: SeededRng,
}

/// Named trainable variables, initialized from a seeded generator in
/// creation order so that identical construction gives identical weights.
#[derive(Clone)]
pub struct VarStore {
    inner: Arc<Mutex<Inner>>,
    dtype: DType,
    device: Device,
}

impl VarStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner { vars: BTreeMap::new(), rng: rng::seeded(seed, 0x5eed) })),
            dtype,
            device: device.clone(),
        }
    }

    pub fn root(&self) -> VarPath {
        VarPath { store: self.clone(), prefix: String::new() }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// All variables sorted by name.
    pub fn vars(&self) -> Vec<(String, Var)> {
        let inner = self.inner.lock().unwrap();
        inner.vars.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn num_params(&self) -> usize {
        self.vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars().into_iter().map(|(k, v)| (k, v.as_tensor().clone())).collect()
    }

    /// Copies values into existing variables; names and shapes must match exactly.
    pub fn load(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        let inner = self.inner.lock().unwrap();
        if tensors.len() != inner.vars.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} tensors, found {}",
                inner.vars.len(),
                tensors.len()
            )));
        }
        for (name, var) in inner.vars.iter() {
            let t = tensors.get(name).ok_or_else(|| Error::InvalidArgument(format!("missing tensor {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::ShapeMismatch { expected: var.dims().to_vec(), actual: t.dims().to_vec() });
            }
            var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    fn get_or_create(&self, name: String, shape: Shape, init: Init) -> Result<Tensor> {
        let mut inner = self.inner.lock().unwrap();
        if let Some(v) = inner.vars.get(&name) {
            if v.shape() != &shape {
                return Err(Error::ShapeMismatch { expected: shape.dims().to_vec(), actual: v.dims().to_vec() });
            }
            return Ok(v.as_tensor().clone());
        }
        let n = shape.elem_count();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => (0..n).map(|_| inner.rng.random_range(-b..=b)).collect(),
            Init::Normal(s) => (0..n).map(|_| s * inner.rng.sample::<f64, _>(StandardNormal)).collect(),
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        inner.vars.insert(name, var);
        Ok(out)
    }
}

/// A name prefix inside a [`VarStore`].
#[derive(Clone)]
pub struct VarPath {
    store: VarStore,
    prefix: String,
}

impl VarPath {
    pub fn pp(&self, name: impl AsRef<str>) -> VarPath {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        VarPath { store: self.store.clone(), prefix }
    }

    pub fn get<S: Into<Shape>>(&self, shape: S, name: &str, init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{}", self.prefix, name) };
        self.store.get_or_create(full, shape.into(), init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}
