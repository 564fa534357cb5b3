//! Layer zoo: convolution, pooling, dense, normalisation, attention,
//! activations and dropout.
//!
//! Layers do not own tensors. Their weights live in a [`ParamStore`] under
//! stable dotted names, and a layer only remembers the [`ParamId`]s it was
//! given at build time. A [`Forward`] pass binds parameters onto a tape on
//! first use.

mod activation;
mod attention;
mod conv;
mod dense;
mod norm;

use std::collections::HashMap;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{self, derive_seed};
use crate::tensor::{Element, Tape, Tensor, Var};

pub use activation::{dropout, Activation, Dropout};
pub use attention::{FeedForward, MultiHeadAttention};
pub use conv::{global_avg_pool, Conv2d, MaxPool2d, Padding};
pub use dense::Dense;
pub use norm::{BatchNorm2d, LayerNorm};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Trainable parameters receive gradients; buffers (running statistics)
/// are state that is saved with the model but never optimised.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    Buffer,
}

#[derive(Clone, Debug)]
struct Entry<T: Element> {
    name: String,
    kind: ParamKind,
    tensor: Tensor<T>,
}

/// Named parameter registry in registration order.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Element = f32> {
    entries: Vec<Entry<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, tensor: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        let id = ParamId(self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            kind,
            tensor: tensor.with_requires_grad(kind == ParamKind::Trainable),
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.kind(id) == ParamKind::Trainable)
    }

    /// Element count over trainable parameters.
    pub fn count_trainable(&self) -> usize {
        self.trainable().map(|id| self.get(id).numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.zero_grad());
    }

    pub fn accumulate_grads(&mut self, grads: Vec<(ParamId, Vec<T>)>) -> Result<()> {
        for (id, g) in grads {
            self.entries[id.0].tensor.accumulate_grad(&g)?;
        }
        Ok(())
    }

    /// Overwrite buffer contents (running statistics after a training pass).
    pub fn apply_updates(&mut self, updates: Vec<(ParamId, Vec<T>)>) {
        for (id, v) in updates {
            self.entries[id.0].tensor.data_mut().copy_from_slice(&v);
        }
    }

    /// FNV-1a hash over names and value bits, for cheap equality checks.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for e in &self.entries {
            eat(e.name.as_bytes());
            for v in e.tensor.data() {
                eat(&v.as_f64().to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Weight initialisation schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// `U(-b, b)` with `b = sqrt(6 / fan_in)`; suits ReLU-family stacks.
    KaimingUniform {
        fan_in: usize,
    },
    /// `U(-b, b)` with `b = sqrt(6 / (fan_in + fan_out))`.
    XavierUniform {
        fan_in: usize,
        fan_out: usize,
    },
    Normal {
        std: f64,
    },
}

fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl Init {
    fn tensor<T: Element>(self, shape: &[usize], seed: u64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let uniform = |bound: f64| {
            let mut r = rng::seeded(seed);
            use rand::Rng as _;
            (0..n)
                .map(|_| T::of(bound * (2.0 * r.random::<f64>() - 1.0)))
                .collect::<Vec<_>>()
        };
        let data = match self {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::KaimingUniform { fan_in } => uniform((6.0 / fan_in.max(1) as f64).sqrt()),
            Init::XavierUniform { fan_in, fan_out } => uniform((6.0 / (fan_in + fan_out).max(1) as f64).sqrt()),
            Init::Normal { std } => {
                let mut r = rng::seeded(seed);
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut r);
                        T::of(std * z)
                    })
                    .collect()
            }
        };
        Tensor::from_parts(shape.to_vec(), data)
    }
}

/// Registers parameters under a name prefix. Each parameter's initial
/// values come from its own stream, `derive_seed(seed, fnv1a(full_name))`,
/// so initialisation does not depend on registration order.
pub struct Builder<'a, T: Element = f32> {
    store: &'a mut ParamStore<T>,
    seed: u64,
    prefix: String,
}

impl<'a, T: Element> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Builder {
            store,
            seed,
            prefix: String::new(),
        }
    }

    /// A builder whose names are nested under `scope`.
    pub fn scope(&mut self, scope: &str) -> Builder<'_, T> {
        Builder {
            store: &mut *self.store,
            seed: self.seed,
            prefix: format!("{}{}.", self.prefix, scope),
        }
    }

    fn full(&self, name: &str) -> String {
        format!("{}{}", self.prefix, name)
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let full = self.full(name);
        let t = init.tensor(shape, derive_seed(self.seed, name_hash(&full)));
        self.store.add(&full, t, ParamKind::Trainable)
    }

    pub fn buffer(&mut self, name: &str, tensor: Tensor<T>) -> Result<ParamId> {
        let full = self.full(name);
        self.store.add(&full, tensor, ParamKind::Buffer)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// State of one forward pass: the tape, lazily bound parameters, the
/// dropout stream and pending running-statistic updates.
pub struct Forward<'s, T: Element = f32> {
    pub tape: Tape<T>,
    store: &'s ParamStore<T>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    track_grads: bool,
    dropout_seed: u64,
    dropout_calls: u64,
    updates: Vec<(ParamId, Vec<T>)>,
}

impl<'s, T: Element> Forward<'s, T> {
    /// Gradients are tracked in training mode and skipped in eval mode.
    pub fn new(store: &'s ParamStore<T>, mode: Mode, dropout_seed: u64) -> Self {
        Forward {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            mode,
            track_grads: mode == Mode::Train,
            dropout_seed,
            dropout_calls: 0,
            updates: Vec::new(),
        }
    }

    pub fn track_grads(mut self, on: bool) -> Self {
        self.track_grads = on;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.store.get(id);
        let grad = self.track_grads && self.store.kind(id) == ParamKind::Trainable;
        let v = self.tape.leaf(t.detached().with_requires_grad(grad));
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    /// Seed for the next dropout mask in this pass.
    pub fn next_dropout_seed(&mut self) -> u64 {
        self.dropout_calls += 1;
        derive_seed(self.dropout_seed, self.dropout_calls)
    }

    pub(crate) fn push_update(&mut self, id: ParamId, values: Vec<T>) {
        self.updates.push((id, values));
    }

    /// Gradients of bound trainable parameters after `tape.backward`.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<T>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                self.tape.grad(v).map(|g| (ParamId(i), g.to_vec()))
            })
            .collect()
    }

    /// Running-statistic updates collected in training mode.
    pub fn take_updates(&mut self) -> Vec<(ParamId, Vec<T>)> {
        std::mem::take(&mut self.updates)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        let mut b = Builder::new(&mut store, 0);
        b.param("w", &[2], Init::Zeros).unwrap();
        assert!(matches!(b.param("w", &[2], Init::Zeros), Err(Error::DuplicateParam(_))));
        let mut s = b.scope("block");
        s.param("w", &[2], Init::Zeros).unwrap();
        assert!(store.find("block.w").is_some());
    }

    #[test]
    fn init_depends_on_name_not_order() {
        let mut a = ParamStore::<f32>::new();
        let mut b = ParamStore::<f32>::new();
        {
            let mut ba = Builder::new(&mut a, 3);
            ba.param("x", &[4], Init::KaimingUniform { fan_in: 4 }).unwrap();
            ba.param("y", &[4], Init::KaimingUniform { fan_in: 4 }).unwrap();
        }
        {
            let mut bb = Builder::new(&mut b, 3);
            bb.param("y", &[4], Init::KaimingUniform { fan_in: 4 }).unwrap();
            bb.param("x", &[4], Init::KaimingUniform { fan_in: 4 }).unwrap();
        }
        let get = |s: &ParamStore<f32>, n: &str| s.get(s.find(n).unwrap()).data().to_vec();
        assert_eq!(get(&a, "x"), get(&b, "x"));
        assert_ne!(get(&a, "x"), get(&a, "y"));
        let bound = (6.0f32 / 4.0).sqrt();
        assert!(get(&a, "x").iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn count_skips_buffers() {
        let mut store = ParamStore::<f32>::new();
        let mut b = Builder::new(&mut store, 0);
        b.param("w", &[512, 256], Init::Zeros).unwrap();
        b.param("b", &[256], Init::Zeros).unwrap();
        b.buffer("running", Tensor::zeros(&[10])).unwrap();
        assert_eq!(store.count_trainable(), 131_328);
        assert_eq!(ParamStore::<f32>::new().count_trainable(), 0);
    }
}
