//! The feedback pathway: control modules that fuse a top-down spike signal
//! into the attention projections, processing modules that turn a block's
//! output into that signal, and the schedule that chains sub-network
//! segments over the time axis.
//!
//! A run over `T` time steps is split into contiguous segments. Segment `n`
//! consumes its slice of the input plus the feedback produced by segment
//! `n-1`; the feedback is the only inter-segment link apart from the loss
//! (unless the model is configured to carry membrane state). The chain
//! itself lives with the model; this module owns the pieces.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::pm_spatial_attention;
use crate::error::{Error, Result};
use crate::layers::{BatchNorm, ForwardCtx, SpikingLinear};
use crate::neuron::{run_sequence_with, Drive, LifConfig, SpikeTensor};
use crate::tensor::{Init, NodeId, ParamId, ParamStore, Shape, Tape};

/// Where the top-down signal enters the attention computation.
///
/// * `Cm1` — fused into the key path, steering the attention map.
/// * `Cm2` — fused into the value path.
/// * `Cm3` — fused into the block input, ahead of all three projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CmVariant {
    Cm1,
    Cm2,
    Cm3,
}

impl FromStr for CmVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cm1" => Ok(CmVariant::Cm1),
            "cm2" => Ok(CmVariant::Cm2),
            "cm3" => Ok(CmVariant::Cm3),
            other => Err(Error::Config(format!(
                "unknown control variant `{other}` (expected cm1|cm2|cm3)"
            ))),
        }
    }
}

impl fmt::Display for CmVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CmVariant::Cm1 => "cm1",
            CmVariant::Cm2 => "cm2",
            CmVariant::Cm3 => "cm3",
        })
    }
}

/// Channel-mixer layout of the processing module.
///
/// * `V1` — one spiking projection (the default).
/// * `V2` — two stacked spiking projections.
/// * `V3` — per-channel scale, then norm and neuron.
/// * `V4` — spiking projection with an OR (elementwise max) residual from
///   the input spikes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PmVariant {
    V1,
    V2,
    V3,
    V4,
}

impl FromStr for PmVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "v1" => Ok(PmVariant::V1),
            "v2" => Ok(PmVariant::V2),
            "v3" => Ok(PmVariant::V3),
            "v4" => Ok(PmVariant::V4),
            other => Err(Error::Config(format!(
                "unknown processing variant `{other}` (expected v1|v2|v3|v4)"
            ))),
        }
    }
}

impl fmt::Display for PmVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PmVariant::V1 => "v1",
            PmVariant::V2 => "v2",
            PmVariant::V3 => "v3",
            PmVariant::V4 => "v4",
        })
    }
}

/// The top-down spike signal emitted by one segment for the next.
#[derive(Clone)]
pub struct FeedbackSignal {
    pub s_td: SpikeTensor,
    pub origin_segment: usize,
}

/// How `T` time steps are split into chained sub-network segments, and the
/// per-segment loss weights.
#[derive(Debug, Clone)]
pub struct SubnetSchedule {
    total_t: usize,
    segments: Vec<Range<usize>>,
    alphas: Vec<f64>,
}

impl SubnetSchedule {
    pub fn new(total_t: usize, segments: Vec<Range<usize>>, alphas: Vec<f64>) -> Result<Self> {
        if total_t == 0 {
            return Err(Error::Config("schedule needs at least one time step".into()));
        }
        if segments.is_empty() {
            return Err(Error::Config("schedule needs at least one segment".into()));
        }
        let mut cursor = 0;
        for (i, seg) in segments.iter().enumerate() {
            if seg.start != cursor || seg.end <= seg.start {
                return Err(Error::Config(format!(
                    "segment {i} ({seg:?}) breaks the contiguous cover of 0..{total_t}"
                )));
            }
            cursor = seg.end;
        }
        if cursor != total_t {
            return Err(Error::Config(format!(
                "segments cover 0..{cursor} but the schedule spans 0..{total_t}"
            )));
        }
        if alphas.len() != segments.len() {
            return Err(Error::Config(format!(
                "{} loss weights for {} segments",
                alphas.len(),
                segments.len()
            )));
        }
        for &a in &alphas {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!("loss weight {a} outside [0, 1]")));
            }
        }
        let sum: f64 = alphas.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("loss weights sum to {sum}, need 1")));
        }
        Ok(SubnetSchedule {
            total_t,
            segments,
            alphas,
        })
    }

    /// `n` equal-length segments; `n` must divide `total_t`.
    pub fn uniform(total_t: usize, n: usize) -> Result<Self> {
        if n == 0 || total_t % n != 0 {
            return Err(Error::Config(format!(
                "cannot split {total_t} steps into {n} equal segments"
            )));
        }
        let len = total_t / n;
        let segments = (0..n).map(|i| i * len..(i + 1) * len).collect();
        Self::new(total_t, segments, Self::default_alphas(n))
    }

    /// One segment per time step.
    pub fn fine_grained(total_t: usize) -> Result<Self> {
        Self::new(
            total_t,
            (0..total_t).map(|t| t..t + 1).collect(),
            Self::default_alphas(total_t),
        )
    }

    /// The final segment gets weight 0.75, the rest share 0.25 equally (a
    /// single segment gets 1).
    pub fn default_alphas(n: usize) -> Vec<f64> {
        if n <= 1 {
            return vec![1.0];
        }
        let head = 0.25 / (n - 1) as f64;
        let mut a = vec![head; n];
        a[n - 1] = 0.75;
        a
    }

    pub fn with_alphas(self, alphas: Vec<f64>) -> Result<Self> {
        Self::new(self.total_t, self.segments, alphas)
    }

    pub fn total_t(&self) -> usize {
        self.total_t
    }

    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn segment(&self, i: usize) -> Range<usize> {
        self.segments[i].clone()
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn is_fine_grained(&self) -> bool {
        self.segments.len() == self.total_t
    }
}

/// Align a producing segment's feedback to the consuming segment's length:
/// step-wise when the lengths match, otherwise the producer's last time step
/// is broadcast.
pub fn align_feedback(tape: &mut Tape, s_td: &SpikeTensor, target_t: usize) -> Result<SpikeTensor> {
    let dims = tape.shape(s_td.node).dims().to_vec();
    let t = dims[0];
    if t == target_t {
        return Ok(s_td.clone());
    }
    let last = tape.slice_axis0(s_td.node, t - 1, 1)?;
    let reps = vec![last; target_t];
    let node = tape.concat_many(&reps, 0)?;
    SpikeTensor::from_node(tape, node, "align_feedback")
}

/// The attention-side fusion of bottom-up and top-down spikes. The fused
/// path concatenates both streams on the channel axis and projects back to
/// `C` through a spiking projection (the token mixer); which projection gets
/// the fused input depends on the variant. An absent top-down signal feeds
/// zeros into the mixer's feedback half, which is exactly the no-feedback
/// baseline.
pub struct ControlModule {
    pub variant: CmVariant,
    pub dim: usize,
    mixer: SpikingLinear,
    q: SpikingLinear,
    k: Option<SpikingLinear>,
    v: Option<SpikingLinear>,
    name: String,
}

/// Projection triple emitted by a control module; the value is absent for
/// query-key attention kinds.
pub struct Projections {
    pub q: SpikeTensor,
    pub k: SpikeTensor,
    pub v: Option<SpikeTensor>,
}

impl ControlModule {
    /// `with_value` selects whether a value path exists (query-key attention
    /// kinds run without one; `Cm2` requires it).
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        lif: LifConfig,
        variant: CmVariant,
        with_value: bool,
    ) -> Result<Self> {
        if variant == CmVariant::Cm2 && !with_value {
            return Err(Error::Config(
                "cm2 fuses feedback into the value path, which this attention kind lacks".into(),
            ));
        }
        let mixer = SpikingLinear::new(store, rng, &format!("{name}.mix"), 2 * dim, dim, lif.clone())?;
        let q = SpikingLinear::new(store, rng, &format!("{name}.q"), dim, dim, lif.clone())?;
        let k = if variant == CmVariant::Cm1 {
            None
        } else {
            Some(SpikingLinear::new(store, rng, &format!("{name}.k"), dim, dim, lif.clone())?)
        };
        let v = if !with_value || variant == CmVariant::Cm2 {
            None
        } else {
            Some(SpikingLinear::new(store, rng, &format!("{name}.v"), dim, dim, lif)?)
        };
        Ok(ControlModule {
            variant,
            dim,
            mixer,
            q,
            k,
            v,
            name: name.to_string(),
        })
    }

    pub fn has_value_path(&self) -> bool {
        self.v.is_some() || self.variant == CmVariant::Cm2
    }

    /// Concatenate the bottom-up stream with the (possibly absent) top-down
    /// stream on the channel axis.
    fn fuse_input(
        &self,
        ctx: &mut ForwardCtx,
        s_bu: &SpikeTensor,
        s_td: Option<&SpikeTensor>,
    ) -> Result<NodeId> {
        let bu_shape = ctx.tape.shape(s_bu.node).clone();
        let td = match s_td {
            Some(td) => {
                if ctx.tape.shape(td.node) != &bu_shape {
                    return Err(Error::shape(
                        "control_module",
                        format!(
                            "feedback shape {} vs bottom-up {}",
                            ctx.tape.shape(td.node),
                            bu_shape
                        ),
                    ));
                }
                td.node
            }
            None => ctx.tape.full(bu_shape, 0.0)?,
        };
        ctx.tape.log_firing(&format!("{}.s_td_in", self.name), td);
        ctx.tape.concat(s_bu.node, td, 3)
    }

    /// Project the bottom-up stream (with feedback fused per the variant)
    /// into attention inputs.
    pub fn project(
        &self,
        ctx: &mut ForwardCtx,
        s_bu: &SpikeTensor,
        s_td: Option<&SpikeTensor>,
    ) -> Result<Projections> {
        let dims = ctx.tape.shape(s_bu.node).dims().to_vec();
        if dims.len() != 4 || dims[3] != self.dim {
            return Err(Error::shape(
                "control_module",
                format!(
                    "expected [T,B,N,{}], got {}",
                    self.dim,
                    ctx.tape.shape(s_bu.node)
                ),
            ));
        }
        let fused = self.fuse_input(ctx, s_bu, s_td)?;
        match self.variant {
            CmVariant::Cm1 => {
                let q = self.q.forward(ctx, s_bu.node)?;
                let k = self.mixer.forward(ctx, fused)?;
                let v = match &self.v {
                    Some(layer) => Some(layer.forward(ctx, s_bu.node)?),
                    None => None,
                };
                Ok(Projections { q, k, v })
            }
            CmVariant::Cm2 => {
                let q = self.q.forward(ctx, s_bu.node)?;
                let k = self.k.as_ref().unwrap().forward(ctx, s_bu.node)?;
                let v = Some(self.mixer.forward(ctx, fused)?);
                Ok(Projections { q, k, v })
            }
            CmVariant::Cm3 => {
                let x = self.mixer.forward(ctx, fused)?;
                let q = self.q.forward(ctx, x.node)?;
                let k = self.k.as_ref().unwrap().forward(ctx, x.node)?;
                let v = match &self.v {
                    Some(layer) => Some(layer.forward(ctx, x.node)?),
                    None => None,
                };
                Ok(Projections { q, k, v })
            }
        }
    }
}

/// Configuration of the processing module: channel-mixer variant, clamp
/// interval of the spatial map, and the neuron the path spikes through.
#[derive(Debug, Clone)]
pub struct PmConfig {
    pub variant: PmVariant,
    /// Lower clamp bound `b` of the spatial map.
    pub clamp_lo: f64,
    /// Upper clamp bound `a` of the spatial map.
    pub clamp_hi: f64,
    pub lif: LifConfig,
}

impl Default for PmConfig {
    fn default() -> Self {
        PmConfig {
            variant: PmVariant::V1,
            clamp_lo: 0.0,
            clamp_hi: 1.5,
            lif: LifConfig::default(),
        }
    }
}

impl PmConfig {
    pub fn validate(&self) -> Result<()> {
        self.lif.validate()?;
        if !(self.clamp_lo.is_finite() && self.clamp_hi.is_finite() && self.clamp_lo < self.clamp_hi)
        {
            return Err(Error::Config(format!(
                "clamp interval requires finite b < a, got b={}, a={}",
                self.clamp_lo, self.clamp_hi
            )));
        }
        Ok(())
    }
}

/// Turns a block's output spikes into the top-down signal: a channel mixer
/// (variant-dependent) followed by the clamped spatial attention gate.
pub struct ProcessingModule {
    pub cfg: PmConfig,
    pub dim: usize,
    mix1: Option<SpikingLinear>,
    mix2: Option<SpikingLinear>,
    dw_scale: Option<ParamId>,
    dw_bn: Option<BatchNorm>,
    w_spatial: ParamId,
    name: String,
}

impl ProcessingModule {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        cfg: PmConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let (mut mix1, mut mix2, mut dw_scale, mut dw_bn) = (None, None, None, None);
        match cfg.variant {
            PmVariant::V1 | PmVariant::V4 => {
                mix1 = Some(SpikingLinear::new(
                    store,
                    rng,
                    &format!("{name}.mix1"),
                    dim,
                    dim,
                    cfg.lif.clone(),
                )?);
            }
            PmVariant::V2 => {
                mix1 = Some(SpikingLinear::new(
                    store,
                    rng,
                    &format!("{name}.mix1"),
                    dim,
                    dim,
                    cfg.lif.clone(),
                )?);
                mix2 = Some(SpikingLinear::new(
                    store,
                    rng,
                    &format!("{name}.mix2"),
                    dim,
                    dim,
                    cfg.lif.clone(),
                )?);
            }
            PmVariant::V3 => {
                dw_scale = Some(store.param(
                    &format!("{name}.dw.scale"),
                    Shape::new(&[dim])?,
                    Init::Ones,
                    rng,
                )?);
                dw_bn = Some(BatchNorm::new(store, &format!("{name}.dw.bn"), dim)?);
            }
        }
        // The spatial gate re-spikes `x * clamp(w . x, b, a)`, so the
        // module only emits anything when the map reaches the threshold. A
        // zero-centered init leaves it silent (the clamp discards the
        // negative half and the surrogate window is never entered, so no
        // gradient can revive it). Start with uniform positive weights
        // sized so a typical input rate (~0.2) lands the gate at the
        // threshold, inside the surrogate window.
        let w_spatial = store.param(
            &format!("{name}.spatial.w"),
            Shape::new(&[dim])?,
            Init::Const(4.8 / dim as f64),
            rng,
        )?;
        Ok(ProcessingModule {
            cfg,
            dim,
            mix1,
            mix2,
            dw_scale,
            dw_bn,
            w_spatial,
            name: name.to_string(),
        })
    }

    fn channel_mix(&self, ctx: &mut ForwardCtx, h: &SpikeTensor) -> Result<SpikeTensor> {
        match self.cfg.variant {
            PmVariant::V1 => self.mix1.as_ref().unwrap().forward(ctx, h.node),
            PmVariant::V2 => {
                let m = self.mix1.as_ref().unwrap().forward(ctx, h.node)?;
                self.mix2.as_ref().unwrap().forward(ctx, m.node)
            }
            PmVariant::V3 => {
                let w = ctx.leaf(self.dw_scale.unwrap())?;
                let w_b = ctx.tape.reshape(w, &[1, 1, 1, self.dim])?;
                let z = ctx.tape.hadamard(h.node, w_b)?;
                let z = self.dw_bn.as_ref().unwrap().forward(ctx, z, 3)?;
                let (s, _) =
                    run_sequence_with(ctx.tape, &self.cfg.lif, Drive::Direct, z, None)?;
                ctx.tape.log_firing(&format!("{}.dw", self.name), s.node);
                Ok(s)
            }
            PmVariant::V4 => {
                let m = self.mix1.as_ref().unwrap().forward(ctx, h.node)?;
                let or = ctx.tape.maximum(m.node, h.node)?;
                SpikeTensor::from_node(ctx.tape, or, "pm.v4")
            }
        }
    }

    /// `S_td = PM(H)`: channel mix, spatial gate, spike.
    pub fn forward(
        &self,
        ctx: &mut ForwardCtx,
        h: &SpikeTensor,
        origin_segment: usize,
    ) -> Result<FeedbackSignal> {
        let dims = ctx.tape.shape(h.node).dims().to_vec();
        if dims.len() != 4 || dims[3] != self.dim {
            return Err(Error::shape(
                "processing_module",
                format!("expected [T,B,N,{}], got {}", self.dim, ctx.tape.shape(h.node)),
            ));
        }
        ctx.tape.push_scope(&self.name);
        let out: Result<SpikeTensor> = (|| {
            let mixed = self.channel_mix(ctx, h)?;
            let w = ctx.leaf(self.w_spatial)?;
            let s_td = pm_spatial_attention(
                ctx.tape,
                &self.cfg.lif,
                &mixed,
                w,
                self.cfg.clamp_lo,
                self.cfg.clamp_hi,
            )?;
            ctx.tape.log_firing(&format!("{}.out", self.name), s_td.node);
            Ok(s_td)
        })();
        ctx.tape.pop_scope();
        Ok(FeedbackSignal {
            s_td: out?,
            origin_segment,
        })
    }
}
