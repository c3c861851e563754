use std::collections::{BTreeMap, HashMap};

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

pub struct Adam {
    pub config: AdamConfig,
    params: Vec<(String, Var)>,
    moments: BTreeMap<String, (Tensor, Tensor)>,
    step: u64,
}

impl Adam {
    pub fn new(params: Vec<(String, Var)>, config: AdamConfig) -> Self {
        Self {
            config,
            params,
            moments: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update from `grads`; returns the pre-clip global gradient norm.
    pub fn step(&mut self, grads: &GradStore) -> Result<f64> {
        let c = self.config;
        let mut sq = 0.0;
        for (_, var) in &self.params {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += super::scalar(&g.sqr()?.sum_all()?)?;
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::DivergenceDetected(format!("gradient norm {norm}")));
        }
        let scale = if c.clip_norm > 0.0 && norm > c.clip_norm {
            c.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, var) in &self.params {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = (g * scale)?;
            let (m, v) = match self.moments.get(name) {
                Some((m, v)) => (
                    ((m * c.beta1)? + (&g * (1.0 - c.beta1))?)?,
                    ((v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?,
                ),
                None => ((&g * (1.0 - c.beta1))?, (g.sqr()? * (1.0 - c.beta2))?),
            };
            if c.lr != 0.0 {
                let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + c.eps)?)?;
                var.set(&(var.as_tensor() - (update * c.lr)?)?)?;
            }
            self.moments.insert(name.clone(), (m, v));
        }
        Ok(norm)
    }

    /// Moment tensors under `<prefix>m.<name>` / `<prefix>v.<name>`.
    pub fn state_tensors(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, (m, v)) in &self.moments {
            out.insert(format!("{prefix}m.{name}"), m.clone());
            out.insert(format!("{prefix}v.{name}"), v.clone());
        }
        out
    }

    pub fn load_state(&mut self, map: &HashMap<String, Tensor>, prefix: &str, step: u64) -> Result<()> {
        self.moments.clear();
        for (name, var) in &self.params {
            let m = map.get(&format!("{prefix}m.{name}"));
            let v = map.get(&format!("{prefix}v.{name}"));
            if let (Some(m), Some(v)) = (m, v) {
                let dt = var.dtype();
                self.moments.insert(name.clone(), (m.to_dtype(dt)?, v.to_dtype(dt)?));
            }
        }
        self.step = step;
        Ok(())
    }
}
