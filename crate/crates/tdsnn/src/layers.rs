//! Trainable layers shared across the network: linear maps, batch
//! normalisation with running statistics, and the spiking projection
//! `Linear -> BatchNorm -> LIF` that attention and feedback paths are built
//! from.
//!
//! Activations in this crate are laid out time-major, `[T, B, N, C]` (time,
//! batch, tokens, channels); normalisation statistics pool over everything
//! but the channel axis, and the LIF state advances over the leading axis.
//!
//! Layer forwards thread a [`ForwardCtx`]: the tape being built, the
//! parameter binding, the store, the train/eval phase, and the optional
//! membrane carry-over used when chained segments share neuron state.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::neuron::{run_sequence_with, Drive, LifConfig, SpikeTensor};
use crate::tensor::{
    BnBatchStats, BnMode, Init, NodeId, ParamId, ParamStore, Shape, Tape, TapeBinding,
};

/// Epsilon inside the batch-norm denominator.
pub const BN_EPS: f64 = 1e-5;
/// EMA weight of the newest batch in the running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// Whether a forward pass is a training step (batch statistics, running-stat
/// updates) or an evaluation pass (frozen running statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

impl Phase {
    pub fn is_train(self) -> bool {
        matches!(self, Phase::Train)
    }
}

/// Membrane state carried between chained segment forwards, keyed by layer
/// name. With `carry` off (the default) the bag is inert and every layer
/// starts from rest. States are nodes of the same tape, so carried membranes
/// stay differentiable across segments.
#[derive(Default)]
pub struct StateBag {
    carry: bool,
    states: HashMap<String, NodeId>,
}

impl StateBag {
    pub fn new(carry: bool) -> Self {
        StateBag {
            carry,
            states: HashMap::new(),
        }
    }

    pub fn carries(&self) -> bool {
        self.carry
    }

    fn take(&mut self, name: &str) -> Option<NodeId> {
        if self.carry {
            self.states.remove(name)
        } else {
            None
        }
    }

    fn put(&mut self, name: &str, v: NodeId) {
        if self.carry {
            self.states.insert(name.to_string(), v);
        }
    }

    /// Drop all carried state (e.g. at a sample boundary).
    pub fn reset(&mut self) {
        self.states.clear();
    }
}

/// Everything a layer forward threads: the tape under construction, the
/// parameter leaves bound to it, the store, the phase, and carried neuron
/// state.
pub struct ForwardCtx<'a> {
    pub tape: &'a mut Tape,
    pub binding: &'a mut TapeBinding,
    pub store: &'a mut ParamStore,
    pub phase: Phase,
    pub states: StateBag,
}

impl<'a> ForwardCtx<'a> {
    pub fn new(
        tape: &'a mut Tape,
        binding: &'a mut TapeBinding,
        store: &'a mut ParamStore,
        phase: Phase,
    ) -> Self {
        ForwardCtx {
            tape,
            binding,
            store,
            phase,
            states: StateBag::default(),
        }
    }

    /// Leaf node of one parameter on this context's tape.
    pub fn leaf(&mut self, id: ParamId) -> Result<NodeId> {
        self.binding.leaf(self.tape, self.store, id)
    }
}

/// Fully connected map over the trailing axis.
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.param(
            &format!("{name}.weight"),
            Shape::new(&[in_features, out_features])?,
            Init::FanIn { fan_in: in_features },
            rng,
        )?;
        let bias = if bias {
            Some(store.param(
                &format!("{name}.bias"),
                Shape::new(&[out_features])?,
                Init::Zeros,
                rng,
            )?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_features,
            out_features,
        })
    }

    pub fn forward(&self, ctx: &mut ForwardCtx, x: NodeId) -> Result<NodeId> {
        let w = ctx.leaf(self.weight)?;
        let b = match self.bias {
            Some(id) => Some(ctx.leaf(id)?),
            None => None,
        };
        ctx.tape.linear(x, w, b)
    }
}

/// Batch normalisation over one channel axis. Training normalizes with the
/// statistics of the current batch and folds them into running buffers;
/// evaluation normalizes with the running buffers and fails if no training
/// batch has initialized them yet.
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
    batches_seen: ParamId,
    pub features: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, features: usize) -> Result<Self> {
        let shape = Shape::new(&[features])?;
        let mut fixed = rand::rngs::mock::StepRng::new(0, 0);
        let gamma = store.param(&format!("{name}.gamma"), shape.clone(), Init::Ones, &mut fixed)?;
        let beta = store.param(&format!("{name}.beta"), shape.clone(), Init::Zeros, &mut fixed)?;
        let running_mean = store.buffer(&format!("{name}.running_mean"), shape.clone(), Init::Zeros)?;
        let running_var = store.buffer(&format!("{name}.running_var"), shape, Init::Ones)?;
        let batches_seen = store.buffer(&format!("{name}.batches_seen"), Shape::new(&[1])?, Init::Zeros)?;
        Ok(Self {
            gamma,
            beta,
            running_mean,
            running_var,
            batches_seen,
            features,
        })
    }

    pub fn forward(&self, ctx: &mut ForwardCtx, x: NodeId, channel_axis: usize) -> Result<NodeId> {
        let gamma = ctx.leaf(self.gamma)?;
        let beta = ctx.leaf(self.beta)?;
        if ctx.phase.is_train() {
            let (y, stats) =
                ctx.tape
                    .batch_norm(x, gamma, beta, channel_axis, BN_EPS, BnMode::Batch)?;
            let stats = stats.expect("train-mode batch norm returns batch stats");
            self.update_running(ctx.store, &stats);
            Ok(y)
        } else {
            if ctx.store.values(self.batches_seen)[0] < 1.0 {
                return Err(Error::Numeric(format!(
                    "batch norm `{}` evaluated before any training batch seeded its running statistics",
                    ctx.store.name(self.gamma)
                )));
            }
            let mode = BnMode::Running {
                mean: ctx.store.values(self.running_mean).to_vec(),
                var: ctx.store.values(self.running_var).to_vec(),
            };
            let (y, _) = ctx
                .tape
                .batch_norm(x, gamma, beta, channel_axis, BN_EPS, mode)?;
            Ok(y)
        }
    }

    fn update_running(&self, store: &mut ParamStore, stats: &BnBatchStats) {
        // Normalization uses the biased variance; the running estimate keeps
        // the unbiased one. The first batch seeds the buffers directly so a
        // short run is not anchored to the (0, 1) init.
        let m = stats.count as f64;
        let unbias = if stats.count > 1 { m / (m - 1.0) } else { 1.0 };
        let first = store.values(self.batches_seen)[0] == 0.0;
        let blend = |r: &mut f64, b: f64| {
            *r = if first {
                b
            } else {
                (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b
            };
        };
        let mean = stats.mean.clone();
        for (r, b) in store.values_mut(self.running_mean).iter_mut().zip(mean) {
            blend(r, b);
        }
        let var = stats.var.clone();
        for (r, b) in store.values_mut(self.running_var).iter_mut().zip(var) {
            blend(r, b * unbias);
        }
        store.values_mut(self.batches_seen)[0] += 1.0;
    }

    /// Number of training batches folded into the running statistics.
    pub fn batches_seen(&self, store: &ParamStore) -> u64 {
        store.values(self.batches_seen)[0] as u64
    }
}

/// The standard spiking projection `Linear -> BatchNorm -> LIF` over a
/// `[T, B, N, C]` activation. The linear map carries no bias (the norm's
/// shift plays that role), the norm pools over time, batch and tokens, and
/// the neuron runs with [`Drive::Direct`] over the leading time axis.
///
/// Each forward pass attributes its arithmetic to an op-count scope and logs
/// firing statistics under the layer's name. If the context's [`StateBag`]
/// carries, the membrane continues from the previous forward of this layer.
pub struct SpikingLinear {
    pub linear: Linear,
    pub bn: BatchNorm,
    pub lif: LifConfig,
    name: String,
}

impl SpikingLinear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_features: usize,
        out_features: usize,
        lif: LifConfig,
    ) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(
                store,
                rng,
                &format!("{name}.linear"),
                in_features,
                out_features,
                false,
            )?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), out_features)?,
            lif,
            name: name.to_string(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn forward(&self, ctx: &mut ForwardCtx, x: NodeId) -> Result<SpikeTensor> {
        ctx.tape.push_scope(&self.name);
        let out = self.forward_inner(ctx, x);
        ctx.tape.pop_scope();
        out
    }

    fn forward_inner(&self, ctx: &mut ForwardCtx, x: NodeId) -> Result<SpikeTensor> {
        let rank = ctx.tape.shape(x).rank();
        if rank < 2 {
            return Err(Error::shape(
                "spiking_linear",
                format!("need [T, ..., C], got {}", ctx.tape.shape(x)),
            ));
        }
        let z = self.linear.forward(ctx, x)?;
        let z = self.bn.forward(ctx, z, rank - 1)?;
        let v0 = ctx.states.take(&self.name);
        let (s, state) = run_sequence_with(ctx.tape, &self.lif, Drive::Direct, z, v0)?;
        ctx.states.put(&self.name, state.v);
        ctx.tape.log_firing(&self.name, s.node);
        Ok(s)
    }
}

/// Two stacked spiking projections with a widened hidden layer.
pub struct Mlp {
    pub fc1: SpikingLinear,
    pub fc2: SpikingLinear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        features: usize,
        hidden: usize,
        lif: LifConfig,
    ) -> Result<Self> {
        Ok(Self {
            fc1: SpikingLinear::new(store, rng, &format!("{name}.fc1"), features, hidden, lif.clone())?,
            fc2: SpikingLinear::new(store, rng, &format!("{name}.fc2"), hidden, features, lif)?,
        })
    }

    pub fn forward(&self, ctx: &mut ForwardCtx, x: NodeId) -> Result<SpikeTensor> {
        let h = self.fc1.forward(ctx, x)?;
        self.fc2.forward(ctx, h.node)
    }
}
