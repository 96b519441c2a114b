//! Named, seeded parameter storage and the Adam optimiser.
//!
//! Every tensor that training mutates lives here so that a checkpoint is
//! just this map plus optimiser moments and the RNG.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, MutexGuard};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{ArtemisError, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Const(f64),
    Normal { mean: f64, std: f64 },
}

impl Init {
    pub const ZEROS: Init = Init::Const(0.0);
    pub const ONES: Init = Init::Const(1.0);
    /// DCGAN-style weight initialisation.
    pub const DCGAN: Init = Init::Normal {
        mean: 0.0,
        std: 0.02,
    };
}

/// `n` standard normal draws from `rng`.
pub fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn gaussian_tensor(
    rng: &mut ChaCha8Rng,
    shape: impl Into<Shape>,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let shape = shape.into();
    let v = gaussian_vec(rng, shape.elem_count());
    Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
}

#[derive(Default)]
struct Slots {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

struct Inner {
    slots: Slots,
    rng: ChaCha8Rng,
}

/// Shared map of named variables. Cloning shares storage; [`ParamStore::pp`]
/// returns a view with an extended name prefix.
///
/// Lookups are get-or-create: building a second module under an existing
/// prefix reuses the same variables.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
    prefix: String,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                slots: Slots::default(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            prefix: String::new(),
            dtype,
            device: device.clone(),
        }
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().expect("parameter store poisoned")
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let name = name.as_ref();
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Self {
            inner: self.inner.clone(),
            prefix,
            dtype: self.dtype,
            device: self.device.clone(),
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn create(&self, inner: &mut Inner, shape: &Shape, init: Init) -> Result<Var> {
        let t = match init {
            Init::Const(v) => (Tensor::ones(shape, self.dtype, &self.device)? * v)?,
            Init::Normal { mean, std } => {
                let v: Vec<f64> = gaussian_vec(&mut inner.rng, shape.elem_count())
                    .into_iter()
                    .map(|g| mean + std * g)
                    .collect();
                Tensor::from_vec(v, shape, &self.device)?.to_dtype(self.dtype)?
            }
        };
        Ok(Var::from_tensor(&t)?)
    }

    fn get_or_create(
        &self,
        shape: impl Into<Shape>,
        name: &str,
        init: Init,
        buffer: bool,
    ) -> Result<Var> {
        let shape = shape.into();
        let full = self.full_name(name);
        let mut inner = self.lock();
        let existing = if buffer {
            inner.slots.buffers.get(&full)
        } else {
            inner.slots.params.get(&full)
        };
        if let Some(v) = existing {
            if v.shape() != &shape {
                return Err(ArtemisError::shape(format!(
                    "parameter {full} exists with shape {:?}, requested {:?}",
                    v.shape(),
                    shape
                )));
            }
            return Ok(v.clone());
        }
        let var = self.create(&mut inner, &shape, init)?;
        let map = if buffer {
            &mut inner.slots.buffers
        } else {
            &mut inner.slots.params
        };
        map.insert(full, var.clone());
        Ok(var)
    }

    /// Trainable parameter.
    pub fn param(&self, shape: impl Into<Shape>, name: &str, init: Init) -> Result<Var> {
        self.get_or_create(shape, name, init, false)
    }

    /// Non-trainable state such as batch-norm running statistics.
    pub fn buffer(&self, shape: impl Into<Shape>, name: &str, init: Init) -> Result<Var> {
        self.get_or_create(shape, name, init, true)
    }

    /// Trainable parameters whose names start with this view's prefix, sorted.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        let inner = self.lock();
        inner
            .slots
            .params
            .iter()
            .filter(|(k, _)| self.owns(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    fn owns(&self, key: &str) -> bool {
        self.prefix.is_empty()
            || key == self.prefix
            || key
                .strip_prefix(&self.prefix)
                .is_some_and(|rest| rest.starts_with('.'))
    }

    /// Parameters and buffers under this prefix, keyed by full name.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        let inner = self.lock();
        inner
            .slots
            .params
            .iter()
            .chain(inner.slots.buffers.iter())
            .filter(|(k, _)| self.owns(k))
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Overwrite every variable under this prefix from `src`. Fails before
    /// mutating anything if a key is missing or a shape differs.
    pub fn load(&self, src: &HashMap<String, Tensor>) -> Result<()> {
        let inner = self.lock();
        let vars: Vec<(&String, &Var)> = inner
            .slots
            .params
            .iter()
            .chain(inner.slots.buffers.iter())
            .filter(|(k, _)| self.owns(k))
            .collect();
        for (name, var) in &vars {
            let t = src
                .get(*name)
                .ok_or_else(|| ArtemisError::config(format!("checkpoint lacks tensor {name}")))?;
            if t.shape() != var.shape() {
                return Err(ArtemisError::config(format!(
                    "tensor {name} has shape {:?} in checkpoint, model expects {:?}",
                    t.shape(),
                    var.shape()
                )));
            }
        }
        for (name, var) in vars {
            var.set(&src[name].to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    pub fn num_elements(&self) -> usize {
        self.tensors().values().map(|t| t.elem_count()).sum()
    }
}

/// SHA-256 over the little-endian bytes of named tensors, in key order.
pub fn tensors_checksum<'a>(
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<String> {
    let mut hasher = Sha256::new();
    for (name, t) in tensors {
        hasher.update(name.as_bytes());
        let flat = t.flatten_all()?;
        match t.dtype() {
            DType::F64 => {
                for v in flat.to_vec1::<f64>()? {
                    hasher.update(v.to_le_bytes());
                }
            }
            _ => {
                for v in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
    }
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over a fixed, named parameter list. Moments are exposed so they can
/// be checkpointed.
pub struct Adam {
    cfg: AdamConfig,
    params: Vec<(String, Var)>,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
    steps: u64,
}

impl Adam {
    pub fn new(params: Vec<(String, Var)>, cfg: AdamConfig) -> Result<Self> {
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for (name, var) in &params {
            first.insert(name.clone(), var.zeros_like()?);
            second.insert(name.clone(), var.zeros_like()?);
        }
        Ok(Self {
            cfg,
            params,
            first,
            second,
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);
        for (name, var) in &self.params {
            let Some(g) = grads.get(var) else { continue };
            // Gradients may still reference the forward graph.
            let g = &g.detach();
            let m = self.first.get_mut(name).expect("moment registered");
            *m = ((&*m * beta1)? + (g * (1.0 - beta1))?)?.detach();
            let v = self.second.get_mut(name).expect("moment registered");
            *v = ((&*v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?.detach();
            let m_hat = (&*m / bias1)?;
            let v_hat = (&*v / bias2)?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            var.set(&var.as_tensor().sub(&(update * lr)?)?)?;
        }
        Ok(())
    }

    /// Moments keyed `<prefix>.m.<param>` / `<prefix>.v.<param>`.
    pub fn state_tensors(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, m) in &self.first {
            out.insert(format!("{prefix}.m.{name}"), m.clone());
        }
        for (name, v) in &self.second {
            out.insert(format!("{prefix}.v.{name}"), v.clone());
        }
        out
    }

    pub fn load_state(
        &mut self,
        prefix: &str,
        src: &HashMap<String, Tensor>,
        steps: u64,
    ) -> Result<()> {
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for (name, var) in &self.params {
            for (kind, dst) in [("m", &mut first), ("v", &mut second)] {
                let key = format!("{prefix}.{kind}.{name}");
                let t = src.get(&key).ok_or_else(|| {
                    ArtemisError::config(format!("checkpoint lacks optimiser tensor {key}"))
                })?;
                if t.shape() != var.shape() {
                    return Err(ArtemisError::config(format!(
                        "optimiser tensor {key} shape mismatch"
                    )));
                }
                dst.insert(name.clone(), t.to_dtype(var.dtype())?);
            }
        }
        self.first = first;
        self.second = second;
        self.steps = steps;
        Ok(())
    }
}

/// Square root whose gradient is defined as zero where the input is zero.
///
/// Norms of exactly-equal tensors show up whenever outputs coincide; plain
/// `sqrt` would backpropagate `0 / 0` there.
pub fn safe_sqrt(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(SafeSqrt)?)
}

struct SafeSqrt;

impl candle_core::CustomOp1 for SafeSqrt {
    fn name(&self) -> &'static str {
        "safe-sqrt"
    }

    fn cpu_fwd(
        &self,
        storage: &candle_core::CpuStorage,
        layout: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, Shape)> {
        use candle_core::CpuStorage;
        let Some((a, b)) = layout.contiguous_offsets() else {
            candle_core::bail!("safe-sqrt expects a contiguous input")
        };
        fn map<T: Copy>(src: &[T], f: impl Fn(T) -> T) -> Vec<T> {
            src.iter().map(|&v| f(v)).collect()
        }
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(map(&v[a..b], f32::sqrt)),
            CpuStorage::F64(v) => CpuStorage::F64(map(&v[a..b], f64::sqrt)),
            _ => candle_core::bail!("safe-sqrt supports f32/f64 only"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(
        &self,
        arg: &Tensor,
        res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        let zero_mask = arg.eq(0.0)?;
        let denom = zero_mask.where_cond(&res.ones_like()?, &(res * 2.0)?)?;
        let g = (grad_res / denom)?;
        Ok(Some(zero_mask.where_cond(&g.zeros_like()?, &g)?))
    }
}
