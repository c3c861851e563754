//! Small neural-network toolkit on top of candle tensors: seeded parameter
//! storage, transformer layers, Adam and a checkpoint container.

pub mod checkpoint;
pub mod layers;
pub mod optim;

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub use checkpoint::{file_sha256, Checkpoint};
pub use layers::*;
pub use optim::{Adam, AdamConfig};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Uniform(f64),
    Normal(f64),
}

/// Named trainable variables with deterministic, seeded initialisation.
pub struct ParamStore {
    vars: RefCell<BTreeMap<String, Var>>,
    rng: RefCell<ChaCha8Rng>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: RefCell::new(BTreeMap::new()),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn root(&self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// All variables in name order.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.vars
            .borrow()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Variables whose name starts with `prefix`.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<(String, Var)> {
        self.vars()
            .into_iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.borrow().get(name).cloned()
    }

    pub fn num_params(&self) -> usize {
        self.vars.borrow().values().map(|v| v.elem_count()).sum()
    }

    /// Detached copies of every parameter, for saving.
    pub fn tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .borrow()
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?.detach())))
            .collect()
    }

    /// Overwrites every parameter from `map`; names and shapes must match.
    pub fn load_tensors(&self, map: &HashMap<String, Tensor>, prefix: &str) -> Result<()> {
        for (name, var) in self.vars.borrow().iter() {
            let key = format!("{prefix}{name}");
            let t = map
                .get(&key)
                .ok_or_else(|| Error::format(key.clone(), "missing tensor in checkpoint"))?;
            if t.dims() != var.dims() {
                return Err(Error::shape(format!(
                    "{key}: checkpoint {:?} vs model {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    fn init(&self, name: String, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.vars.borrow().get(&name) {
            return Ok(v.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = {
            let mut rng = self.rng.borrow_mut();
            match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Uniform(b) => (0..n).map(|_| rng.gen_range(-b..=b)).collect(),
                Init::Normal(s) => (0..n).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect(),
            }
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.borrow_mut().insert(name, var);
        Ok(out)
    }
}

/// A name prefix inside a [`ParamStore`].
#[derive(Clone)]
pub struct Scope<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn sub(&self, name: &str) -> Scope<'a> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Scope {
            store: self.store,
            prefix,
        }
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.init(full, shape, init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}

/// Scalar value of a 0-d or single-element tensor as f64.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?[0])
}

/// Number of scalars a tensor holds, converted to a flat f64 vector.
pub fn to_vec_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

/// Compares autograd gradients of `loss` with central finite differences on
/// up to `per_var` entries of every variable; returns the worst relative error.
pub fn gradient_check(
    store: &ParamStore,
    loss: impl Fn() -> Result<Tensor>,
    per_var: usize,
    eps: f64,
) -> Result<f64> {
    let grads = loss()?.backward()?;
    let mut worst: f64 = 0.0;
    for (_, var) in store.vars() {
        let base = to_vec_f64(var.as_tensor())?;
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => to_vec_f64(g)?,
            None => vec![0.0; base.len()],
        };
        let stride = (base.len() / per_var.max(1)).max(1);
        for idx in (0..base.len()).step_by(stride).take(per_var) {
            let eval = |delta: f64| -> Result<f64> {
                let mut v = base.clone();
                v[idx] += delta;
                var.set(&Tensor::from_vec(v, var.shape(), var.device())?.to_dtype(var.dtype())?)?;
                scalar(&loss()?)
            };
            let numeric = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
            let a = analytic[idx];
            // tiny gradients are compared against a 1e-4 floor
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            worst = worst.max(err);
        }
        var.set(&Tensor::from_vec(base, var.shape(), var.device())?.to_dtype(var.dtype())?)?;
    }
    Ok(worst)
}
