use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::binio::fnv1a;
use crate::error::{Error, Result};

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Arc<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), Arc::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Arc<Tensor>> {
        self.tensors.get(name)
    }

    /// Replaces an existing tensor; the shape must not change.
    pub fn replace(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::Model(format!("unknown parameter {name:?}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape("replace", slot.shape(), value.shape()));
        }
        *slot = Arc::new(value);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Arc<Tensor>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }
}

/// Uniform Glorot initialisation for matrices, zeros for vectors. Each
/// parameter draws from its own generator keyed by name, so the result does
/// not depend on creation order.
pub(crate) fn init_tensor(name: &str, shape: &[usize], seed: u64) -> Tensor {
    if shape.len() < 2 {
        return Tensor::zeros(shape);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()));
    let (fan_in, fan_out) = (shape[0] as f64, shape[1] as f64);
    let limit = (6.0 / (fan_in + fan_out)).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

/// Per-tape view of a [`ParamStore`]: binds parameters lazily, supplies
/// dropout seeds, and collects gradients after backward.
pub struct Session<'t> {
    pub tape: &'t Tape,
    params: &'t ParamStore,
    bound: RefCell<BTreeMap<&'t str, Var<'t>>>,
    track_grads: bool,
    train: bool,
    seed: u64,
    draws: Cell<u64>,
}

impl<'t> Session<'t> {
    /// Forward-only session: parameters are constants, dropout is off.
    pub fn inference(tape: &'t Tape, params: &'t ParamStore) -> Self {
        Session::new(tape, params, false, false, 0)
    }

    /// Gradient-tracking session. `train` enables dropout drawn from `seed`.
    pub fn training(tape: &'t Tape, params: &'t ParamStore, train: bool, seed: u64) -> Self {
        Session::new(tape, params, true, train, seed)
    }

    fn new(tape: &'t Tape, params: &'t ParamStore, track_grads: bool, train: bool, seed: u64) -> Self {
        Session {
            tape,
            params,
            bound: RefCell::new(BTreeMap::new()),
            track_grads,
            train,
            seed,
            draws: Cell::new(0),
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn param(&self, name: &str) -> Result<Var<'t>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let (key, value) = self
            .params
            .tensors
            .get_key_value(name)
            .ok_or_else(|| Error::Model(format!("missing parameter {name:?}")))?;
        let v = if self.track_grads {
            self.tape.param(value.clone())
        } else {
            self.tape.shared(value.clone())
        };
        self.bound.borrow_mut().insert(key.as_str(), v);
        Ok(v)
    }

    pub fn dropout(&self, x: Var<'t>, rate: f64) -> Var<'t> {
        if !self.train {
            return x;
        }
        let n = self.draws.get();
        self.draws.set(n + 1);
        x.dropout(rate, true, mix(self.seed, n))
    }

    /// Gradients of every parameter bound so far; unreached ones are zero.
    pub fn gradients(&self) -> BTreeMap<String, Tensor> {
        self.bound
            .borrow()
            .iter()
            .map(|(name, v)| {
                let g = v
                    .grad()
                    .unwrap_or_else(|| Tensor::zeros(v.value().shape()));
                (name.to_string(), g)
            })
            .collect()
    }
}

/// SplitMix64 finaliser over `seed + n`.
pub(crate) fn mix(seed: u64, n: u64) -> u64 {
    let mut z = seed.wrapping_add(n.wrapping_add(1).wrapping_mul(0x9e3779b97f4a7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
