//! Named parameter storage shared by every model in the crate.
//!
//! A [`ParamStore`] maps parameter names to tensors plus their accumulated
//! gradients and a `frozen` flag the optimizer honors. Insertion order is
//! preserved (and serialized), so checkpoints written from the same code path
//! are byte-stable. Values survive a JSON round trip bit-exactly because the
//! serializer prints shortest-round-trip decimal for every f64.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("parameter `{0}` already exists")]
    Duplicate(String),
    #[error("parameter `{0}` not found")]
    Missing(String),
    #[error("checkpoint io error at `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint parse error: {0}")]
    Parse(String),
    #[error("parameter `{name}` has {actual} values but shape {shape:?} needs {expected}")]
    ShapeMismatch { name: String, shape: Vec<usize>, expected: usize, actual: usize },
}

/// One named tensor with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
    pub frozen: bool,
}

impl Parameter {
    fn new(value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad, frozen: false }
    }
}

/// Serialized form of one parameter tensor (row-major data).
#[derive(Serialize, Deserialize)]
pub(crate) struct ParamRecord {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
    pub(crate) frozen: bool,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    params: IndexMap<String, ParamRecord>,
}

const CHECKPOINT_VERSION: u32 = 1;

/// Ordered collection of named parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter; the name must be unused.
    pub fn add(&mut self, name: &str, value: ArrayD<f64>) -> Result<(), ParamError> {
        if self.params.contains_key(name) {
            return Err(ParamError::Duplicate(name.to_string()));
        }
        self.params.insert(name.to_string(), Parameter::new(value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Parameter, ParamError> {
        self.params.get(name).ok_or_else(|| ParamError::Missing(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter, ParamError> {
        self.params.get_mut(name).ok_or_else(|| ParamError::Missing(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn n_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for param in self.params.values_mut() {
            param.grad.fill(0.0);
        }
    }

    /// Adds `grads` (keyed by name) into the stored gradient accumulators.
    pub fn accumulate_grads(
        &mut self,
        grads: &std::collections::BTreeMap<String, ArrayD<f64>>,
    ) -> Result<(), ParamError> {
        for (name, grad) in grads {
            let param = self.get_mut(name)?;
            param.grad += grad;
        }
        Ok(())
    }

    /// Sets the frozen flag on every parameter whose name starts with `prefix`.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for (name, param) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                param.frozen = frozen;
                n += 1;
            }
        }
        n
    }

    /// SHA-256 over the exact bit patterns of every parameter whose name
    /// starts with `prefix` (sorted by name). Two stores agree on this
    /// checksum iff those parameters are bitwise identical.
    pub fn checksum_prefix(&self, prefix: &str) -> String {
        let mut names: Vec<&String> = self.params.keys().filter(|n| n.starts_with(prefix)).collect();
        names.sort();
        let mut hasher = Sha256::new();
        for name in names {
            let param = &self.params[name.as_str()];
            hasher.update(name.as_bytes());
            for d in param.value.shape() {
                hasher.update(d.to_le_bytes());
            }
            for v in param.value.iter() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Moves every parameter of `other` into `self`; name clashes error.
    pub fn absorb(&mut self, other: ParamStore) -> Result<(), ParamError> {
        for name in other.params.keys() {
            if self.params.contains_key(name) {
                return Err(ParamError::Duplicate(name.clone()));
            }
        }
        for (name, param) in other.params {
            self.params.insert(name, param);
        }
        Ok(())
    }

    /// A new store holding clones of the parameters under `prefix`.
    pub fn subset_prefix(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, param) in &self.params {
            if name.starts_with(prefix) {
                out.params.insert(name.clone(), param.clone());
            }
        }
        out
    }

    /// Serialized view of every parameter, in insertion order.
    pub(crate) fn to_records(&self) -> IndexMap<String, ParamRecord> {
        self.params
            .iter()
            .map(|(name, param)| {
                let record = ParamRecord {
                    shape: param.value.shape().to_vec(),
                    data: param.value.iter().copied().collect(),
                    frozen: param.frozen,
                };
                (name.clone(), record)
            })
            .collect()
    }

    /// Rebuilds a store from serialized records, validating data lengths.
    pub(crate) fn from_records(
        records: IndexMap<String, ParamRecord>,
    ) -> Result<Self, ParamError> {
        let mut store = ParamStore::new();
        for (name, record) in records {
            let expected: usize = record.shape.iter().product();
            if record.data.len() != expected {
                return Err(ParamError::ShapeMismatch {
                    name,
                    shape: record.shape,
                    expected,
                    actual: record.data.len(),
                });
            }
            let value = ArrayD::from_shape_vec(IxDyn(&record.shape), record.data)
                .map_err(|e| ParamError::Parse(e.to_string()))?;
            let mut param = Parameter::new(value);
            param.frozen = record.frozen;
            store.params.insert(name, param);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<(), ParamError> {
        let file =
            CheckpointFile { format_version: CHECKPOINT_VERSION, params: self.to_records() };
        let json = serde_json::to_string(&file).expect("checkpoint serializes");
        fs::write(path, json).map_err(|e| ParamError::Io { path: path.display().to_string(), source: e })
    }

    pub fn load(path: &Path) -> Result<Self, ParamError> {
        let json = fs::read_to_string(path)
            .map_err(|e| ParamError::Io { path: path.display().to_string(), source: e })?;
        let file: CheckpointFile =
            serde_json::from_str(&json).map_err(|e| ParamError::Parse(e.to_string()))?;
        if file.format_version != CHECKPOINT_VERSION {
            return Err(ParamError::Parse(format!(
                "unsupported checkpoint version {}",
                file.format_version
            )));
        }
        Self::from_records(file.params)
    }
}

// ---------------------------------------------------------------------------
// Initialization helpers
// ---------------------------------------------------------------------------

/// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)) — the usual choice
/// for linear maps feeding saturating nonlinearities.
pub fn xavier_uniform(rng: &mut ChaCha8Rng, n_in: usize, n_out: usize) -> ArrayD<f64> {
    let a = (6.0 / (n_in + n_out) as f64).sqrt();
    let data: Vec<f64> = (0..n_in * n_out).map(|_| rng.gen_range(-a..a)).collect();
    ArrayD::from_shape_vec(IxDyn(&[n_in, n_out]), data).expect("shape matches data")
}

/// N(0, std) tensor of the given shape (position embeddings, class tokens).
pub fn normal_init(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    let dist = Normal::new(0.0, std).expect("valid normal");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(dist)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches data")
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(shape), 1.0)
}
