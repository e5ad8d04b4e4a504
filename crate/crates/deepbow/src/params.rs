//! Flat parameter storage.
//!
//! All trainable tensors live in one contiguous `f64` buffer, addressed
//! through a name → (offset, shape) registry. That single decision buys the
//! rest of the crate a lot: the Adam update, finite-difference probing, and
//! checkpoint serialization are each a loop over one slice, and gradient
//! accumulation is a parallel buffer with identical layout.

use std::collections::HashMap;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::math::Matrix;
use crate::{DeepBowError, Result};

/// Handle to one registered tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub usize);

/// How a tensor is filled by [`ParamStore::initialize`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    UniformFanIn(usize),
    /// All zeros (biases).
    Zero,
}

#[derive(Debug, Clone)]
pub struct TensorMeta {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub init: Init,
}

impl TensorMeta {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }
}

/// The flat store. Tensors are laid out in registration order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    values: Vec<f64>,
    metas: Vec<TensorMeta>,
    by_name: HashMap<String, TensorId>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            values: Vec::new(),
            metas: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a `rows × cols` tensor. Names must be unique; they become
    /// the checkpoint's tensor order.
    pub fn register(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> TensorId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate tensor name {name}"
        );
        let id = TensorId(self.metas.len());
        let offset = self.values.len();
        self.values.resize(offset + rows * cols, 0.0);
        self.metas.push(TensorMeta {
            name: name.to_string(),
            rows,
            cols,
            offset,
            init,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    /// Fills every tensor according to its init rule. One RNG stream in
    /// registration order keeps the result a pure function of the seed;
    /// zero-init tensors draw nothing, so inserting one never shifts the
    /// stream for its neighbors.
    pub fn initialize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for meta in &self.metas {
            let slice = &mut self.values[meta.offset..meta.offset + meta.rows * meta.cols];
            match meta.init {
                Init::Zero => slice.fill(0.0),
                Init::UniformFanIn(fan_in) => {
                    let scale = 1.0 / (fan_in as f64).sqrt();
                    let dist = Uniform::new_inclusive(-scale, scale);
                    for value in slice {
                        *value = dist.sample(&mut rng);
                    }
                }
            }
        }
    }

    pub fn find(&self, name: &str) -> Option<TensorId> {
        self.by_name.get(name).copied()
    }

    pub fn meta(&self, id: TensorId) -> &TensorMeta {
        &self.metas[id.0]
    }

    pub fn metas(&self) -> &[TensorMeta] {
        &self.metas
    }

    pub fn tensor_count(&self) -> usize {
        self.metas.len()
    }

    /// Total scalar parameter count.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slice(&self, id: TensorId) -> &[f64] {
        let meta = &self.metas[id.0];
        &self.values[meta.offset..meta.offset + meta.len()]
    }

    pub fn slice_mut(&mut self, id: TensorId) -> &mut [f64] {
        let meta = &self.metas[id.0];
        let (offset, len) = (meta.offset, meta.len());
        &mut self.values[offset..offset + len]
    }

    /// Copies a tensor out as a [`Matrix`] (tests and small read paths).
    pub fn matrix(&self, id: TensorId) -> Matrix {
        let meta = &self.metas[id.0];
        Matrix::from_vec(meta.rows, meta.cols, self.slice(id).to_vec())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Replaces the whole flat buffer (checkpoint load, best-epoch restore).
    pub fn set_values(&mut self, values: Vec<f64>) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(DeepBowError::Mismatch(format!(
                "parameter buffer length {} does not match registry length {}",
                values.len(),
                self.values.len()
            )));
        }
        self.values = values;
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Gradient buffer with the same layout as its [`ParamStore`].
#[derive(Debug, Clone)]
pub struct GradBuffer {
    data: Vec<f64>,
}

impl GradBuffer {
    pub fn zeros_like(store: &ParamStore) -> Self {
        GradBuffer {
            data: vec![0.0; store.len()],
        }
    }

    pub fn clear(&mut self) {
        self.data.fill(0.0);
    }

    pub fn slice_mut(&mut self, store: &ParamStore, id: TensorId) -> &mut [f64] {
        let meta = store.meta(id);
        &mut self.data[meta.offset..meta.offset + meta.len()]
    }

    pub fn slice(&self, store: &ParamStore, id: TensorId) -> &[f64] {
        let meta = store.meta(id);
        &self.data[meta.offset..meta.offset + meta.len()]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Scales every gradient (batch averaging).
    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.data {
            *g *= factor;
        }
    }
}
