//! The desk-scale spiking transformer with a feedback chain, its multi-stage
//! loss, the training loop, and checkpointing.
//!
//! A forward pass splits the time window into segments per a
//! [`SubnetSchedule`]. Each segment runs the full column — spiking patch
//! embed, transformer blocks, classifier head — on its slice of the input;
//! the processing module turns the segment's final hidden state into a
//! top-down signal that the next segment's first block fuses into its
//! attention projections. With one segment (or feedback disabled) the model
//! is exactly the plain feed-forward backbone.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_core, AttentionConfig, AttentionKind, QkvProjector};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::{ForwardCtx, Linear, Phase, SpikingLinear, StateBag};
use crate::neuron::{LifConfig, SpikeTensor};
use crate::optim::{OptimConfig, Optimizer};
use crate::tensor::{NodeId, ParamStore, Precision, Tape, TapeBinding};
use crate::topdown::{
    align_feedback, CmVariant, ControlModule, FeedbackSignal, PmConfig, PmVariant, ProcessingModule,
    SubnetSchedule,
};

/// Static description of the model. Defaults give the desk-scale setup:
/// four time steps in two segments, an 8x8 token grid, 32 channels, two
/// transformer blocks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Total time steps `T`.
    pub t: usize,
    /// Number of chained segments.
    pub n_sub: usize,
    /// Embedding channels `C`.
    pub embed_c: usize,
    /// Transformer block count.
    pub depth: usize,
    /// Token count (e.g. 64 for an 8x8 grid).
    pub tokens: usize,
    /// Raw per-token input features ahead of the embed.
    pub in_dim: usize,
    pub num_classes: usize,
    pub heads: usize,
    /// Hidden width of each block's MLP, as a multiple of `embed_c`.
    pub mlp_ratio: usize,
    pub attention: AttentionKind,
    /// Attention scale; `None` picks 0.125 for the kinds that need one.
    pub attn_scale: Option<f64>,
    pub cm_variant: CmVariant,
    pub pm_variant: PmVariant,
    /// Clamp interval `[b, a]` of the feedback spatial map.
    pub clamp_lo: f64,
    pub clamp_hi: f64,
    pub lif: LifConfig,
    /// When false the chain never runs the processing module and every
    /// segment sees a zero top-down signal.
    pub feedback_enabled: bool,
    /// Carry membrane state across segment boundaries instead of resetting.
    pub carry_state: bool,
    /// Per-segment loss weights; `None` uses the schedule default.
    pub alphas: Option<Vec<f64>>,
    /// Parameter-initialization seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            t: 4,
            n_sub: 2,
            embed_c: 32,
            depth: 2,
            tokens: 64,
            in_dim: 16,
            num_classes: 2,
            heads: 2,
            mlp_ratio: 4,
            attention: AttentionKind::Ssa,
            attn_scale: None,
            cm_variant: CmVariant::Cm1,
            pm_variant: PmVariant::V1,
            clamp_lo: 0.0,
            clamp_hi: 1.5,
            lif: LifConfig::default(),
            feedback_enabled: true,
            carry_state: false,
            alphas: None,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.tokens == 0 || self.in_dim == 0 || self.depth == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        if !(1.0..=2.0).contains(&self.clamp_hi) || self.clamp_lo < 0.0 {
            return Err(Error::Config(format!(
                "clamp interval [{}, {}] must satisfy 0 <= b < a with a in [1, 2]",
                self.clamp_lo, self.clamp_hi
            )));
        }
        if self.clamp_lo >= self.clamp_hi {
            return Err(Error::Config(format!(
                "clamp lower bound {} must sit below upper bound {}",
                self.clamp_lo, self.clamp_hi
            )));
        }
        self.attention_config()?.validate()?;
        self.schedule()?;
        Ok(())
    }

    /// The attention configuration this model runs with.
    pub fn attention_config(&self) -> Result<AttentionConfig> {
        let scale = if self.attention.needs_scale() {
            Some(self.attn_scale.unwrap_or(0.125))
        } else {
            self.attn_scale
        };
        Ok(AttentionConfig {
            kind: self.attention,
            dim: self.embed_c,
            heads: self.heads,
            scale,
            lif: self.lif.clone(),
        })
    }

    /// Uniform segment schedule, with custom loss weights when configured.
    pub fn schedule(&self) -> Result<SubnetSchedule> {
        let s = SubnetSchedule::uniform(self.t, self.n_sub)?;
        match &self.alphas {
            Some(a) => s.with_alphas(a.clone()),
            None => Ok(s),
        }
    }

    fn pm_config(&self) -> PmConfig {
        PmConfig {
            variant: self.pm_variant,
            clamp_lo: self.clamp_lo,
            clamp_hi: self.clamp_hi,
            lif: self.lif.clone(),
        }
    }
}

/// Attention-projection source of one block: the first block fuses the
/// top-down signal through a control module, later blocks project plainly.
enum BlockProj {
    Control(ControlModule),
    Plain(QkvProjector),
}

struct Block {
    source: BlockProj,
    proj: SpikingLinear,
    mlp: crate::layers::Mlp,
    name: String,
}

impl Block {
    fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cfg: &ModelConfig,
        with_control: bool,
    ) -> Result<Self> {
        let uses_v = cfg.attention.uses_value();
        let source = if with_control {
            BlockProj::Control(ControlModule::new(
                store,
                rng,
                &format!("{name}.cm"),
                cfg.embed_c,
                cfg.lif.clone(),
                cfg.cm_variant,
                uses_v,
            )?)
        } else if uses_v {
            BlockProj::Plain(QkvProjector::new(
                store,
                rng,
                &format!("{name}.attn"),
                cfg.embed_c,
                cfg.lif.clone(),
            )?)
        } else {
            BlockProj::Plain(QkvProjector::new_qk(
                store,
                rng,
                &format!("{name}.attn"),
                cfg.embed_c,
                cfg.lif.clone(),
            )?)
        };
        Ok(Block {
            source,
            proj: SpikingLinear::new(
                store,
                rng,
                &format!("{name}.proj"),
                cfg.embed_c,
                cfg.embed_c,
                cfg.lif.clone(),
            )?,
            mlp: crate::layers::Mlp::new(
                store,
                rng,
                &format!("{name}.mlp"),
                cfg.embed_c,
                cfg.embed_c * cfg.mlp_ratio,
                cfg.lif.clone(),
            )?,
            name: name.to_string(),
        })
    }

    fn forward(
        &self,
        ctx: &mut ForwardCtx,
        attn_cfg: &AttentionConfig,
        x: &SpikeTensor,
        s_td: Option<&SpikeTensor>,
    ) -> Result<SpikeTensor> {
        let (q, k, v) = match &self.source {
            BlockProj::Control(cm) => {
                let p = cm.project(ctx, x, s_td)?;
                (p.q, p.k, p.v)
            }
            BlockProj::Plain(proj) => {
                if attn_cfg.kind.uses_value() {
                    let (q, k, v) = proj.make_qkv(ctx, x)?;
                    (q, k, Some(v))
                } else {
                    let (q, k) = proj.make_qk(ctx, x)?;
                    (q, k, None)
                }
            }
        };
        ctx.tape.push_scope(&format!("{}.core", self.name));
        let a = attention_core(ctx.tape, attn_cfg, &q, &k, v.as_ref());
        ctx.tape.pop_scope();
        let a = a?;
        ctx.tape.log_firing(&format!("{}.core", self.name), a.node);
        let o = self.proj.forward(ctx, a.node)?;
        // Spike-preserving residuals: elementwise OR.
        let h = ctx.tape.maximum(x.node, o.node)?;
        let h = SpikeTensor::from_node(ctx.tape, h, &format!("{}.res1", self.name))?;
        let m = self.mlp.forward(ctx, h.node)?;
        let out = ctx.tape.maximum(h.node, m.node)?;
        SpikeTensor::from_node(ctx.tape, out, &format!("{}.res2", self.name))
    }
}

/// Everything a chained forward pass produces.
pub struct ChainOutput {
    /// Per-segment logits, each `[T_seg, B, classes]`.
    pub stage_logits: Vec<NodeId>,
    /// Per-segment final hidden states, each `[T_seg, B, tokens, C]`.
    pub hiddens: Vec<SpikeTensor>,
    /// Feedback signals emitted between segments (empty when feedback is
    /// off or there is a single segment).
    pub feedbacks: Vec<FeedbackSignal>,
}

pub struct SpikingTransformer {
    pub cfg: ModelConfig,
    attn_cfg: AttentionConfig,
    embed: SpikingLinear,
    blocks: Vec<Block>,
    pm: ProcessingModule,
    head: Linear,
}

impl SpikingTransformer {
    /// Register all parameters into `store` (creation order is the
    /// checkpoint contract) and build the module tree.
    pub fn new(store: &mut ParamStore, cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let attn_cfg = cfg.attention_config()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let embed = SpikingLinear::new(
            store,
            &mut rng,
            "embed",
            cfg.in_dim,
            cfg.embed_c,
            cfg.lif.clone(),
        )?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            blocks.push(Block::new(
                store,
                &mut rng,
                &format!("block{i}"),
                &cfg,
                i == 0,
            )?);
        }
        let pm = ProcessingModule::new(store, &mut rng, "pm", cfg.embed_c, cfg.pm_config())?;
        let head = Linear::new(
            store,
            &mut rng,
            "head",
            cfg.embed_c,
            cfg.num_classes,
            true,
        )?;
        Ok(SpikingTransformer {
            cfg,
            attn_cfg,
            embed,
            blocks,
            pm,
            head,
        })
    }

    /// One segment: embed the input slice, run the block stack, return the
    /// final hidden spikes `[T_seg, B, tokens, C]`.
    fn forward_segment(
        &self,
        ctx: &mut ForwardCtx,
        x: NodeId,
        s_td: Option<&SpikeTensor>,
    ) -> Result<SpikeTensor> {
        let mut cur = self.embed.forward(ctx, x)?;
        for (i, block) in self.blocks.iter().enumerate() {
            let td = if i == 0 { s_td } else { None };
            cur = block.forward(ctx, &self.attn_cfg, &cur, td)?;
        }
        Ok(cur)
    }

    /// Classifier logits: token-mean of the hidden spikes, then an affine
    /// map per time step.
    fn head_logits(&self, ctx: &mut ForwardCtx, h: &SpikeTensor) -> Result<NodeId> {
        ctx.tape.push_scope("head");
        let pooled = ctx.tape.reduce_mean(h.node, 2, false);
        let logits = pooled.and_then(|p| self.head.forward(ctx, p));
        ctx.tape.pop_scope();
        logits
    }

    /// The chained forward pass over `x` of shape `[T, B, tokens, in_dim]`.
    pub fn forward_chain(
        &self,
        ctx: &mut ForwardCtx,
        x: NodeId,
        schedule: &SubnetSchedule,
    ) -> Result<ChainOutput> {
        let dims = ctx.tape.shape(x).dims().to_vec();
        if dims.len() != 4 || dims[0] != schedule.total_t() {
            return Err(Error::shape(
                "forward_chain",
                format!(
                    "input {} does not span the schedule's {} steps",
                    ctx.tape.shape(x),
                    schedule.total_t()
                ),
            ));
        }
        if dims[2] != self.cfg.tokens || dims[3] != self.cfg.in_dim {
            return Err(Error::shape(
                "forward_chain",
                format!(
                    "input {} vs model tokens={}, in_dim={}",
                    ctx.tape.shape(x),
                    self.cfg.tokens,
                    self.cfg.in_dim
                ),
            ));
        }
        ctx.states = StateBag::new(self.cfg.carry_state);
        let segments = schedule.num_segments();
        let mut out = ChainOutput {
            stage_logits: Vec::with_capacity(segments),
            hiddens: Vec::with_capacity(segments),
            feedbacks: Vec::new(),
        };
        let mut fb: Option<FeedbackSignal> = None;
        for n in 0..segments {
            let r = schedule.segment(n);
            let len = r.end - r.start;
            let xs = ctx.tape.slice_axis0(x, r.start, len)?;
            let aligned = match &fb {
                Some(f) => Some(align_feedback(ctx.tape, &f.s_td, len)?),
                None => None,
            };
            let h = self.forward_segment(ctx, xs, aligned.as_ref())?;
            out.stage_logits.push(self.head_logits(ctx, &h)?);
            if self.cfg.feedback_enabled && n + 1 < segments {
                let f = self.pm.forward(ctx, &h, n)?;
                fb = Some(f.clone());
                out.feedbacks.push(f);
            }
            out.hiddens.push(h);
        }
        Ok(out)
    }
}

/// Weighted multi-stage objective: each stage's logits are averaged over
/// its segment's time steps, scored with cross-entropy, and the stage
/// losses combine with the schedule weights. Returns the scalar loss node
/// and the per-stage loss values.
pub fn multi_stage_loss(
    tape: &mut Tape,
    stage_logits: &[NodeId],
    targets: &[usize],
    alphas: &[f64],
) -> Result<(NodeId, Vec<f64>)> {
    if stage_logits.is_empty() || stage_logits.len() != alphas.len() {
        return Err(Error::Config(format!(
            "{} stages with {} loss weights",
            stage_logits.len(),
            alphas.len()
        )));
    }
    let sum: f64 = alphas.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("loss weights sum to {sum}, need 1")));
    }
    let mut stage_values = Vec::with_capacity(stage_logits.len());
    let mut total: Option<NodeId> = None;
    for (&logits, &alpha) in stage_logits.iter().zip(alphas) {
        let mean_t = tape.reduce_mean(logits, 0, false)?;
        let ce = tape.cross_entropy_mean(mean_t, targets)?;
        stage_values.push(tape.values(ce)[0]);
        let weighted = tape.scale(ce, alpha);
        total = Some(match total {
            Some(acc) => tape.add(acc, weighted)?,
            None => weighted,
        });
    }
    Ok((total.unwrap(), stage_values))
}

/// Argmax accuracy of time-averaged logits `[T, B, classes]` against
/// integer targets.
pub fn accuracy(tape: &Tape, logits: NodeId, targets: &[usize]) -> f64 {
    let dims = tape.shape(logits).dims();
    let (t, b, l) = (dims[0], dims[1], dims[2]);
    let v = tape.values(logits);
    let mut correct = 0usize;
    for bi in 0..b {
        let mut best = (0usize, f64::NEG_INFINITY);
        for c in 0..l {
            let mut s = 0.0;
            for ti in 0..t {
                s += v[(ti * b + bi) * l + c];
            }
            if s > best.1 {
                best = (c, s);
            }
        }
        if best.0 == targets[bi] {
            correct += 1;
        }
    }
    correct as f64 / b as f64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    /// Fraction of samples used for training; the rest are held out.
    pub train_fraction: f64,
    pub shuffle: bool,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            optim: OptimConfig::default(),
            train_fraction: 0.75,
            shuffle: true,
            precision: Precision::F64,
        }
    }
}

/// One epoch's aggregate numbers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub loss: f64,
    pub stage_losses: Vec<f64>,
    pub train_acc: f64,
}

/// Everything a training run reports. The wall-clock field is informational
/// and deliberately excluded from emitted artifacts so fixed-seed runs stay
/// byte-identical.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRow>,
    pub final_train_acc: f64,
    pub test_acc: Option<f64>,
    /// Per-site firing rates measured on the held-out pass.
    pub firing: Vec<(String, f64)>,
    pub wall_clock_s: f64,
}

/// Train `model` on `dataset` under `schedule`. Deterministic for a fixed
/// config: shuffling, initialization and data are all seed-derived.
pub fn train(
    model: &SpikingTransformer,
    store: &mut ParamStore,
    dataset: &Dataset,
    schedule: &SubnetSchedule,
    tcfg: &TrainConfig,
) -> Result<TrainReport> {
    if tcfg.epochs == 0 || tcfg.batch_size == 0 {
        return Err(Error::Config("epochs and batch size must be positive".into()));
    }
    if !(0.0..=1.0).contains(&tcfg.train_fraction) {
        return Err(Error::Config(format!(
            "train fraction {} outside [0, 1]",
            tcfg.train_fraction
        )));
    }
    if dataset.cfg.t != schedule.total_t() {
        return Err(Error::Config(format!(
            "dataset has {} time steps, schedule spans {}",
            dataset.cfg.t,
            schedule.total_t()
        )));
    }
    let started = Instant::now();
    let (train_idx, test_idx) = dataset.split(tcfg.train_fraction);
    if train_idx.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let steps_per_epoch = train_idx.len().div_ceil(tcfg.batch_size);
    let mut ocfg = tcfg.optim.clone();
    if ocfg.cosine_steps.is_none() {
        ocfg.cosine_steps = Some(tcfg.epochs * steps_per_epoch);
    }
    let mut opt = Optimizer::new(ocfg)?;
    let alphas = schedule.alphas().to_vec();
    let mut report = TrainReport {
        epochs: Vec::with_capacity(tcfg.epochs),
        final_train_acc: 0.0,
        test_acc: None,
        firing: Vec::new(),
        wall_clock_s: 0.0,
    };

    for epoch in 0..tcfg.epochs {
        let mut order = train_idx.clone();
        if tcfg.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(model.cfg.seed ^ (epoch as u64 + 1));
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        let mut epoch_stages = vec![0.0; schedule.num_segments()];
        let mut seen = 0usize;
        let mut correct = 0.0;
        for chunk in order.chunks(tcfg.batch_size) {
            let targets = dataset.labels(chunk);
            let mut tape = Tape::new(tcfg.precision);
            let mut binding = TapeBinding::new();
            let mut ctx = ForwardCtx::new(&mut tape, &mut binding, store, Phase::Train);
            let x = dataset.batch_input(ctx.tape, chunk)?;
            let out = model.forward_chain(&mut ctx, x, schedule)?;
            let (loss, stages) =
                multi_stage_loss(ctx.tape, &out.stage_logits, &targets, &alphas)?;
            let loss_v = tape.values(loss)[0];
            if !loss_v.is_finite() {
                return Err(Error::Numeric(format!(
                    "training diverged: loss {loss_v} at epoch {epoch}"
                )));
            }
            tape.backward(loss)?;
            binding.flush_grads(&tape, store);
            opt.step(store)?;
            let final_logits = *out.stage_logits.last().unwrap();
            correct += accuracy(&tape, final_logits, &targets) * chunk.len() as f64;
            epoch_loss += loss_v * chunk.len() as f64;
            for (acc, s) in epoch_stages.iter_mut().zip(&stages) {
                *acc += s * chunk.len() as f64;
            }
            seen += chunk.len();
        }
        let n = seen as f64;
        report.epochs.push(EpochRow {
            epoch,
            loss: epoch_loss / n,
            stage_losses: epoch_stages.iter().map(|s| s / n).collect(),
            train_acc: correct / n,
        });
    }
    report.final_train_acc = report.epochs.last().map(|r| r.train_acc).unwrap_or(0.0);

    if !test_idx.is_empty() {
        let (acc, firing) = evaluate(model, store, dataset, schedule, &test_idx, tcfg)?;
        report.test_acc = Some(acc);
        report.firing = firing;
    }
    report.wall_clock_s = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Accuracy and per-site firing rates over the given samples, in eval mode
/// (normalisation uses running statistics).
pub fn evaluate(
    model: &SpikingTransformer,
    store: &mut ParamStore,
    dataset: &Dataset,
    schedule: &SubnetSchedule,
    idx: &[usize],
    tcfg: &TrainConfig,
) -> Result<(f64, Vec<(String, f64)>)> {
    if idx.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let mut correct = 0.0;
    let mut firing: Vec<(String, (f64, u64))> = Vec::new();
    for chunk in idx.chunks(tcfg.batch_size.max(1)) {
        let targets = dataset.labels(chunk);
        let mut tape = Tape::new(tcfg.precision);
        let mut binding = TapeBinding::new();
        let mut ctx = ForwardCtx::new(&mut tape, &mut binding, store, Phase::Eval);
        let x = dataset.batch_input(ctx.tape, chunk)?;
        let out = model.forward_chain(&mut ctx, x, schedule)?;
        let final_logits = *out.stage_logits.last().unwrap();
        correct += accuracy(&tape, final_logits, &targets) * chunk.len() as f64;
        for (name, stat) in tape.firing_stats() {
            match firing.iter_mut().find(|(n, _)| n == name) {
                Some((_, (ones, count))) => {
                    *ones += stat.ones;
                    *count += stat.count;
                }
                None => firing.push((name.to_string(), (stat.ones, stat.count))),
            }
        }
    }
    let rates = firing
        .into_iter()
        .map(|(n, (ones, count))| (n, ones / count.max(1) as f64))
        .collect();
    Ok((correct / idx.len() as f64, rates))
}

// ───────────────────────── checkpointing ─────────────────────────

#[derive(Serialize, Deserialize)]
struct CheckpointParam {
    name: String,
    dims: Vec<usize>,
    trainable: bool,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    model: ModelConfig,
    params: Vec<CheckpointParam>,
}

const CHECKPOINT_VERSION: u32 = 1;

/// Serialize the model config and every parameter/buffer to JSON.
pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, store: &ParamStore) -> Result<()> {
    let params = store
        .ids()
        .map(|id| CheckpointParam {
            name: store.name(id).to_string(),
            dims: store.shape(id).dims().to_vec(),
            trainable: store.is_trainable(id),
            values: store.values(id).to_vec(),
        })
        .collect();
    let ck = Checkpoint {
        version: CHECKPOINT_VERSION,
        model: cfg.clone(),
        params,
    };
    let mut file = std::fs::File::create(path)?;
    let body = serde_json::to_string(&ck)?;
    file.write_all(body.as_bytes())?;
    Ok(())
}

/// Rebuild the model from a checkpoint: construct it fresh from the stored
/// config, then overwrite every parameter and buffer by name. The forward
/// pass after a round-trip is bit-identical.
pub fn load_checkpoint(path: &Path) -> Result<(SpikingTransformer, ParamStore)> {
    let body = std::fs::read_to_string(path)?;
    let ck: Checkpoint = serde_json::from_str(&body)?;
    if ck.version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!(
            "checkpoint version {} (expected {CHECKPOINT_VERSION})",
            ck.version
        )));
    }
    let mut store = ParamStore::new();
    let model = SpikingTransformer::new(&mut store, ck.model.clone())?;
    if ck.params.len() != store.len() {
        return Err(Error::Config(format!(
            "checkpoint holds {} parameters, model defines {}",
            ck.params.len(),
            store.len()
        )));
    }
    for p in &ck.params {
        let id = store
            .lookup(&p.name)
            .ok_or_else(|| Error::Config(format!("checkpoint parameter `{}` is unknown", p.name)))?;
        if store.shape(id).dims() != p.dims.as_slice() {
            return Err(Error::Config(format!(
                "checkpoint parameter `{}` has shape {:?}, model expects {:?}",
                p.name,
                p.dims,
                store.shape(id).dims()
            )));
        }
        store.values_mut(id).copy_from_slice(&p.values);
    }
    Ok((model, store))
}
