use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Position of a parameter in its store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named trainable tensors in insertion order.
///
/// Initialization draws from a single generator seeded once at construction, so
/// registering the same names and shapes in the same order always yields the
/// same values.
#[derive(Debug, Clone)]
pub struct ParameterStore {
    seed: u64,
    rng: ChaCha8Rng,
    tensors: IndexMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new(seed: u64) -> Self {
        ParameterStore {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            tensors: IndexMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Registers a glorot-initialized weight matrix.
    pub fn add_weight(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        let t = Tensor::glorot(rows, cols, &mut self.rng);
        self.insert(name, t)
    }

    /// Registers a zero-initialized bias row.
    pub fn add_bias(&mut self, name: &str, cols: usize) -> Result<ParamId> {
        self.insert(name, Tensor::zeros(1, cols))
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<ParamId> {
        if self.tensors.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        let t = if tensor.requires_grad() { tensor } else { tensor.with_grad() };
        let (idx, _) = self.tensors.insert_full(name.to_string(), t);
        Ok(ParamId(idx))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.tensors
            .get_index_of(name)
            .map(ParamId)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.tensors.get_index(id.0).map(|(k, _)| k.as_str()).unwrap_or("")
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .values()
            .flat_map(|t| t.grad().unwrap_or(&[]).iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Multiplies every gradient by `factor`.
    pub fn scale_grad(&mut self, factor: f64) {
        for t in self.tensors.values_mut() {
            if let Some(g) = t.grad_mut() {
                g.iter_mut().for_each(|x| *x *= factor);
            }
        }
    }

    /// Plain gradient step `p -= lr * grad`, after rescaling the global gradient
    /// norm down to `clip` when it exceeds it.
    pub fn sgd_step(&mut self, lr: f64, clip: Option<f64>) -> Result<()> {
        let norm = self.grad_norm();
        if !norm.is_finite() {
            return Err(Error::Diverged(format!("gradient norm is {norm}")));
        }
        let scale = match clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        for t in self.tensors.values_mut() {
            let Some(g) = t.grad().map(<[f64]>::to_vec) else { continue };
            for (v, gi) in t.values_mut().iter_mut().zip(g) {
                *v -= lr * scale * gi;
            }
        }
        Ok(())
    }

    /// Replaces the values of an existing parameter, checking the shape.
    pub fn load_values(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<()> {
        let t = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
        if t.shape() != shape || t.len() != values.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: expected shape {:?}, found {shape:?}",
                t.shape()
            )));
        }
        t.values_mut().copy_from_slice(&values);
        Ok(())
    }
}
