//! Named trainable parameters living outside any single tape.
//!
//! A [`ParamStore`] owns values and gradient accumulators; each forward pass
//! loads parameters onto a fresh [`Tape`](super::Tape) as leaves (once per
//! tape, so weight sharing accumulates gradients at a single node), and after
//! `backward` the leaf gradients are flushed back into the store.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};

use super::shape::Shape;
use super::tape::{NodeId, Tape};

/// Handle to one parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Initialization scheme for a new parameter.
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Uniform in `[-limit, limit]` with `limit = sqrt(1 / fan_in)`.
    FanIn { fan_in: usize },
    /// Uniform in `[lo, hi]`.
    Uniform { lo: f64, hi: f64 },
}

struct ParamEntry {
    name: String,
    shape: Shape,
    values: Vec<f64>,
    grad: Vec<f64>,
    trainable: bool,
}

/// Ordered collection of named parameters. Order is creation order and is
/// part of the checkpoint contract.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a trainable parameter. Names must be unique.
    pub fn param(
        &mut self,
        name: &str,
        shape: Shape,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        self.register(name, shape, init, rng, true)
    }

    /// Register a non-trainable buffer (e.g. normalisation running statistics).
    /// Buffers are serialized with the store but never receive gradients and
    /// are skipped by optimizers.
    pub fn buffer(&mut self, name: &str, shape: Shape, init: Init) -> Result<ParamId> {
        if matches!(init, Init::FanIn { .. } | Init::Uniform { .. }) {
            return Err(Error::Config(format!(
                "buffer `{name}` requires a deterministic init"
            )));
        }
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        self.register(name, shape, init, &mut rng, false)
    }

    fn register(
        &mut self,
        name: &str,
        shape: Shape,
        init: Init,
        rng: &mut impl Rng,
        trainable: bool,
    ) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let n = shape.numel();
        let values = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::FanIn { fan_in } => {
                let limit = (1.0 / fan_in as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
            }
            Init::Uniform { lo, hi } => (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
        };
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape,
            values,
            grad: vec![0.0; n],
            trainable,
        });
        self.by_name.insert(name.to_string(), self.entries.len() - 1);
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> &Shape {
        &self.entries[id.0].shape
    }

    pub fn values(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].values
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].values
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].grad
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    /// All ids in creation order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Ids of trainable parameters only, in creation order.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].trainable)
            .map(ParamId)
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.iter_mut() {
            for g in e.grad.iter_mut() {
                *g = 0.0;
            }
        }
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }
}

/// Per-forward-pass binding of parameters to tape leaves. Guarantees each
/// parameter appears on the tape exactly once.
#[derive(Default)]
pub struct TapeBinding {
    leaves: HashMap<ParamId, NodeId>,
}

impl TapeBinding {
    pub fn new() -> Self {
        Self::default()
    }

    /// Leaf node for `id`, creating it on first use. Buffers load as
    /// constants so no gradient is tracked for them.
    pub fn leaf(&mut self, tape: &mut Tape, store: &ParamStore, id: ParamId) -> Result<NodeId> {
        if let Some(&n) = self.leaves.get(&id) {
            return Ok(n);
        }
        let n = tape.leaf(
            store.shape(id).clone(),
            store.values(id).to_vec(),
            store.is_trainable(id),
        )?;
        self.leaves.insert(id, n);
        Ok(n)
    }

    /// Add each bound leaf's accumulated tape gradient into the store's
    /// gradient buffers. Call once per tape, after `backward`.
    pub fn flush_grads(&self, tape: &Tape, store: &mut ParamStore) {
        for (&pid, &nid) in self.leaves.iter() {
            let src = tape.grad(nid);
            let dst = &mut store.entries[pid.0].grad;
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
}
