//! Named parameter storage shared by both networks and the checkpoint format.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Storage precision of parameter values.
///
/// Arithmetic is always 64-bit. In `F32` mode every stored value is rounded
/// to the nearest `f32` after initialization and after each update, so a
/// checkpoint (which stores `f32`) reproduces the in-memory network exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

impl Precision {
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::F64 => v,
            Precision::F32 => v as f32 as f64,
        }
    }

    pub fn round_slice(self, values: &mut [f64]) {
        if self == Precision::F32 {
            values.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Running statistics and other state are stored but never receive gradients.
    pub trainable: bool,
}

#[derive(Clone, Debug)]
pub struct ParamStore {
    params: Vec<Param>,
    precision: Precision,
}

impl ParamStore {
    pub fn new(precision: Precision) -> Self {
        Self {
            params: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn add(&mut self, name: impl Into<String>, mut value: Tensor, trainable: bool) -> ParamId {
        self.precision.round_slice(value.data_mut());
        self.params.push(Param {
            name: name.into(),
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn set(&mut self, id: ParamId, mut value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape(
                "params",
                format!("{}: expected {:?}, got {:?}", p.name, p.value.shape(), value.shape()),
            ));
        }
        self.precision.round_slice(value.data_mut());
        p.value = value;
        Ok(())
    }

    pub(crate) fn data_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.params[id.0].value.data_mut()
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.trainable)
            .map(|(i, _)| ParamId(i))
    }

    /// Places every parameter in `graph`. Trainable parameters require a
    /// gradient only when `train` is set.
    pub fn bind(&self, graph: &mut Graph, train: bool) -> Bindings {
        let vars = self
            .params
            .iter()
            .map(|p| graph.leaf(p.value.clone(), train && p.trainable))
            .collect();
        Bindings { vars }
    }

    /// Order-sensitive hash of every stored bit, for freeze checks.
    pub fn fingerprint(&self) -> u64 {
        // FNV-1a over names, shapes and value bits.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for p in &self.params {
            eat(p.name.as_bytes());
            for &d in p.value.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Graph variables for each parameter of a store, indexed by `ParamId`.
#[derive(Clone, Debug)]
pub struct Bindings {
    vars: Vec<Var>,
}

impl Bindings {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients of the trainable parameters that took part in `graph`.
    pub fn grads(&self, store: &ParamStore, graph: &Graph) -> Vec<(ParamId, Vec<f64>)> {
        store
            .trainable_ids()
            .filter_map(|id| {
                let v = self.vars[id.0];
                graph.grad_data(v).map(|g| (id, g.to_vec()))
            })
            .collect()
    }
}

/// Xavier-uniform initialization with limit `sqrt(6 / (fan_in + fan_out))`.
pub fn xavier(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-limit..limit))
}
