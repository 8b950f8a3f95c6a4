use std::collections::HashMap;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Handle to a parameter registered in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A stored tensor together with its gradient buffer.
#[derive(Debug, Clone)]
pub struct TensorValue {
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub requires_grad: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Named parameter registry with trainable flags, Adam state and a seeded RNG.
///
/// The RNG is the only randomness source used by initialisation and dropout,
/// so a store built from the same seed replays bit-identically.
#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    index: HashMap<String, ParamId>,
    params: Vec<TensorValue>,
    moments: Vec<Moments>,
    adam_steps: u64,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            names: Vec::new(),
            index: HashMap::new(),
            params: Vec::new(),
            moments: Vec::new(),
            adam_steps: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Invalid(format!("duplicate parameter name `{name}`")));
        }
        if !value.all_finite() {
            return Err(Error::NonFinite { op: "param_init" });
        }
        let id = ParamId(self.params.len());
        self.names.push(name.to_owned());
        self.index.insert(name.to_owned(), id);
        self.params.push(TensorValue {
            value,
            grad: None,
            requires_grad: trainable,
        });
        self.moments.push(Moments::default());
        Ok(id)
    }

    /// Registers a tensor drawn from N(0, std²) using the store RNG.
    pub fn add_normal(&mut self, name: &str, shape: &[usize], std: f64, trainable: bool) -> Result<ParamId> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::Invalid(e.to_string()))?;
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| normal.sample(&mut self.rng)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?, trainable)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_owned()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &TensorValue {
        &self.params[id.0]
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.params[self.id(name)?.0].value)
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].requires_grad
    }

    /// Freezing drops any accumulated gradient and stops further accumulation.
    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        let p = &mut self.params[id.0];
        p.requires_grad = trainable;
        if !trainable {
            p.grad = None;
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorValue)> {
        self.names.iter().map(String::as_str).zip(self.params.iter())
    }

    pub fn num_trainable_elements(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.requires_grad)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Child generator seeded from the store RNG, for use while the store is borrowed.
    pub fn fork_rng(&mut self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.rng.next_u64())
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if !p.requires_grad {
            return Ok(());
        }
        if grad.shape() != p.value.shape() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("{:?} vs {:?}", grad.shape(), p.value.shape()),
            ));
        }
        match &mut p.grad {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(grad.data()) {
                    *a += b;
                }
            }
            None => p.grad = Some(grad.clone()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Euclidean norm over all trainable gradient buffers.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// One Adam update on every trainable parameter that holds a gradient.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.adam_steps += 1;
        let t = self.adam_steps as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (p, m) in self.params.iter_mut().zip(self.moments.iter_mut()) {
            if !p.requires_grad {
                continue;
            }
            let Some(grad) = p.grad.as_ref() else {
                continue;
            };
            if m.first.is_empty() {
                m.first = vec![0.0; grad.len()];
                m.second = vec![0.0; grad.len()];
            }
            let values = p.value.data_mut();
            for (i, &g) in grad.data().iter().enumerate() {
                m.first[i] = cfg.beta1 * m.first[i] + (1.0 - cfg.beta1) * g;
                m.second[i] = cfg.beta2 * m.second[i] + (1.0 - cfg.beta2) * g * g;
                let mh = m.first[i] / bc1;
                let vh = m.second[i] / bc2;
                values[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
    }

    pub fn snapshot(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor]) {
        for (p, v) in self.params.iter_mut().zip(snapshot) {
            p.value = v.clone();
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            params: self
                .iter()
                .map(|(name, p)| ParamRecord {
                    name: name.to_owned(),
                    shape: p.value.shape().to_vec(),
                    trainable: p.requires_grad,
                    data: p.value.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Overwrites values (and trainable flags) from a checkpoint whose names
    /// and shapes match this store.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                ck.format_version
            )));
        }
        if ck.params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.params.len(),
                ck.params.len()
            )));
        }
        for rec in &ck.params {
            let id = self.id(&rec.name)?;
            let t = Tensor::new(rec.shape.clone(), rec.data.clone())?;
            if t.shape() != self.params[id.0].value.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for `{}`: {:?} vs {:?}",
                    rec.name,
                    t.shape(),
                    self.params[id.0].value.shape()
                )));
            }
            self.params[id.0].value = t;
            self.set_trainable(id, rec.trainable);
        }
        Ok(())
    }

    pub fn from_checkpoint(ck: &Checkpoint, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(seed);
        for rec in &ck.params {
            let t = Tensor::new(rec.shape.clone(), rec.data.clone())?;
            store.add(&rec.name, t, rec.trainable)?;
        }
        Ok(store)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub data: Vec<f64>,
}

/// Self-describing JSON parameter container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
