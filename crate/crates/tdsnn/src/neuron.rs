//! Leaky integrate-and-fire dynamics on the autodiff tape.
//!
//! One step follows the hard-reset recurrence
//!
//! ```text
//! H[t] = V[t-1] + (1/tau) * (X[t] - (V[t-1] - v_reset))
//! S[t] = 1[H[t] >= v_th]
//! V[t] = H[t] * (1 - S[t]) + v_reset * S[t]
//! ```
//!
//! The threshold comparison fires at exactly `H == v_th`. Backward passes
//! see the rectangular surrogate `(1/v_th) * 1[v_th/2 < H < 3 v_th/2]`
//! through `S`, and the reset multiplication participates in the backward
//! pass — nothing is detached, so gradients flow through both the "kept
//! membrane" and the "was reset" paths.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Shape, Tape};

/// Leaky integrate-and-fire parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LifConfig {
    /// Membrane time constant; must be > 1 so the leak factor `1 - 1/tau`
    /// stays in (0, 1).
    pub tau: f64,
    /// Firing threshold; must be > 0.
    pub v_th: f64,
    /// Reset (and initial) membrane potential.
    pub v_reset: f64,
}

impl Default for LifConfig {
    fn default() -> Self {
        LifConfig {
            tau: 2.0,
            v_th: 1.0,
            v_reset: 0.0,
        }
    }
}

impl LifConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 1.0) {
            return Err(Error::Config(format!("lif.tau must be > 1, got {}", self.tau)));
        }
        if !(self.v_th > 0.0) {
            return Err(Error::Config(format!("lif.v_th must be > 0, got {}", self.v_th)));
        }
        if !self.v_reset.is_finite() {
            return Err(Error::Config("lif.v_reset must be finite".to_string()));
        }
        Ok(())
    }

    /// Leak factor `1 - 1/tau`.
    pub fn leak(&self) -> f64 {
        1.0 - 1.0 / self.tau
    }
}

/// A tape node whose values are guaranteed binary. Construction audits the
/// guarantee when debug assertions are enabled (tests and dev builds).
#[derive(Debug, Clone, Copy)]
pub struct SpikeTensor {
    pub node: NodeId,
}

impl SpikeTensor {
    /// Wrap `node`, auditing that every value is exactly 0 or 1.
    pub fn from_node(tape: &Tape, node: NodeId, module: &str) -> Result<Self> {
        if cfg!(debug_assertions) {
            for (i, &v) in tape.values(node).iter().enumerate() {
                if v != 0.0 && v != 1.0 {
                    return Err(Error::SpikeDiscipline {
                        module: module.to_string(),
                        value: v,
                        index: i,
                    });
                }
            }
        }
        Ok(SpikeTensor { node })
    }

    pub fn shape<'t>(&self, tape: &'t Tape) -> &'t Shape {
        tape.shape(self.node)
    }

    /// Fraction of ones.
    pub fn rate(&self, tape: &Tape) -> f64 {
        let v = tape.values(self.node);
        v.iter().sum::<f64>() / v.len() as f64
    }

    /// Number of ones.
    pub fn count(&self, tape: &Tape) -> usize {
        tape.values(self.node).iter().filter(|&&v| v == 1.0).count()
    }
}

/// How the input current enters the membrane.
///
/// * [`Drive::Scaled`] — the classic leaky recurrence: the drive is
///   attenuated by `1/tau` along with the pull toward `v_reset`.
/// * [`Drive::Direct`] — the full drive is added on its arrival step while
///   only the retained state leaks. This is the convention of the spiking
///   layers inside the network (a unit sum crossing the unit threshold must
///   fire on arrival), and matches the recurrence the temporal-sensitivity
///   analysis in [`crate::analysis::epsilon`] studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Drive {
    Scaled,
    Direct,
}

/// Result of a single LIF step.
pub struct LifStep {
    pub spikes: SpikeTensor,
    pub v_next: NodeId,
    /// The pre-threshold membrane `H`; kept so callers can probe temporal
    /// Jacobians at the membrane level.
    pub h: NodeId,
}

/// One LIF update for a whole tensor of neurons. `x` and `v` must share a
/// shape; returns spikes, the next membrane state and the pre-threshold
/// membrane.
pub fn lif_step(tape: &mut Tape, cfg: &LifConfig, x: NodeId, v: NodeId) -> Result<LifStep> {
    lif_step_with(tape, cfg, Drive::Scaled, x, v)
}

/// [`lif_step`] with an explicit drive convention.
pub fn lif_step_with(
    tape: &mut Tape,
    cfg: &LifConfig,
    drive: Drive,
    x: NodeId,
    v: NodeId,
) -> Result<LifStep> {
    cfg.validate()?;
    if tape.shape(x) != tape.shape(v) {
        return Err(Error::shape(
            "lif_step",
            format!("input {} vs state {}", tape.shape(x), tape.shape(v)),
        ));
    }
    // Membrane dynamics are state updates, not synaptic work; keep them out
    // of the op counters.
    tape.pause_counting();
    let out = lif_step_body(tape, cfg, drive, x, v);
    tape.resume_counting();
    out
}

fn lif_step_body(
    tape: &mut Tape,
    cfg: &LifConfig,
    drive: Drive,
    x: NodeId,
    v: NodeId,
) -> Result<LifStep> {
    // Scaled: H = (1 - 1/tau) V + (1/tau) X + v_reset / tau
    // Direct: H = (1 - 1/tau) V +         X + v_reset / tau
    let leak_v = tape.scale(v, cfg.leak());
    let drive_term = match drive {
        Drive::Scaled => tape.scale(x, 1.0 / cfg.tau),
        Drive::Direct => x,
    };
    let sum = tape.add(leak_v, drive_term)?;
    let h = tape.add_scalar(sum, cfg.v_reset / cfg.tau);
    let s = tape.spike(h, cfg.v_th)?;
    // V' = H (1 - S) + v_reset S, kept on-tape so the reset is differentiated.
    let neg_s = tape.scale(s, -1.0);
    let one_minus_s = tape.add_scalar(neg_s, 1.0);
    let kept = tape.hadamard(h, one_minus_s)?;
    let reset = tape.scale(s, cfg.v_reset);
    let v_next = tape.add(kept, reset)?;
    Ok(LifStep {
        spikes: SpikeTensor::from_node(tape, s, "lif_step")?,
        v_next,
        h,
    })
}

/// Membrane state threaded through a spike sequence, with per-step traces of
/// the pre-threshold membranes and spike nodes for gradient probes.
pub struct NeuronState {
    pub v: NodeId,
    pub h_trace: Vec<NodeId>,
    pub s_trace: Vec<NodeId>,
}

/// Run LIF over the leading (time) axis of `x` (`[T, ...]`), threading the
/// membrane across steps. `v0` defaults to a constant tensor at `v_reset`.
/// Returns the stacked spikes (same shape as `x`) and the final state.
pub fn run_sequence(
    tape: &mut Tape,
    cfg: &LifConfig,
    x: NodeId,
    v0: Option<NodeId>,
) -> Result<(SpikeTensor, NeuronState)> {
    run_sequence_with(tape, cfg, Drive::Scaled, x, v0)
}

/// [`run_sequence`] with an explicit drive convention. The network layers run
/// their neurons with [`Drive::Direct`] so that a drive reaching threshold
/// fires on the step it arrives.
pub fn run_sequence_with(
    tape: &mut Tape,
    cfg: &LifConfig,
    drive: Drive,
    x: NodeId,
    v0: Option<NodeId>,
) -> Result<(SpikeTensor, NeuronState)> {
    cfg.validate()?;
    let dims = tape.shape(x).dims().to_vec();
    if dims.len() < 2 {
        return Err(Error::shape(
            "run_sequence",
            format!("need a leading time axis, got rank {}", dims.len()),
        ));
    }
    let t_len = dims[0];
    let mut step_dims = dims.clone();
    step_dims[0] = 1;
    let mut v = match v0 {
        Some(v) => {
            if tape.shape(v).dims() != step_dims {
                return Err(Error::shape(
                    "run_sequence",
                    format!("v0 shape {} vs per-step {:?}", tape.shape(v), step_dims),
                ));
            }
            v
        }
        None => tape.full(Shape::new(&step_dims)?, cfg.v_reset)?,
    };
    let mut spikes = Vec::with_capacity(t_len);
    let mut h_trace = Vec::with_capacity(t_len);
    let mut s_trace = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let xt = tape.slice_axis0(x, t, 1)?;
        let step = lif_step_with(tape, cfg, drive, xt, v)?;
        v = step.v_next;
        h_trace.push(step.h);
        s_trace.push(step.spikes.node);
        spikes.push(step.spikes.node);
    }
    let stacked = tape.concat_many(&spikes, 0)?;
    let out = SpikeTensor::from_node(tape, stacked, "run_sequence")?;
    Ok((
        out,
        NeuronState {
            v,
            h_trace,
            s_trace,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;

    fn scalar_tape() -> Tape {
        Tape::new(Precision::F64)
    }

    fn one(tape: &mut Tape, v: f64) -> NodeId {
        tape.leaf(Shape::new(&[1]).unwrap(), vec![v], true).unwrap()
    }

    #[test]
    fn charge_fire_reset() {
        // tau=2, v_th=1, reset 0, V=0, X=2: H = 1.0, spike, V' = 0.
        let cfg = LifConfig::default();
        let mut t = scalar_tape();
        let x = one(&mut t, 2.0);
        let v = one(&mut t, 0.0);
        let step = lif_step(&mut t, &cfg, x, v).unwrap();
        assert_eq!(t.values(step.h), &[1.0]);
        assert_eq!(t.values(step.spikes.node), &[1.0]);
        assert_eq!(t.values(step.v_next), &[0.0]);
    }

    #[test]
    fn subthreshold_keeps_membrane() {
        let cfg = LifConfig::default();
        let mut t = scalar_tape();
        let x = one(&mut t, 0.5);
        let v = one(&mut t, 0.0);
        let step = lif_step(&mut t, &cfg, x, v).unwrap();
        assert_eq!(t.values(step.h), &[0.25]);
        assert_eq!(t.values(step.spikes.node), &[0.0]);
        assert_eq!(t.values(step.v_next), &[0.25]);
    }

    #[test]
    fn quiescent_at_reset_potential() {
        let cfg = LifConfig {
            tau: 3.0,
            v_th: 1.0,
            v_reset: 0.2,
        };
        let mut t = scalar_tape();
        let x = one(&mut t, 0.0);
        let v = one(&mut t, 0.2);
        let step = lif_step(&mut t, &cfg, x, v).unwrap();
        // At V = v_reset with no drive the membrane only pulls toward reset.
        assert!((t.values(step.h)[0] - 0.2).abs() < 1e-15);
        assert_eq!(t.values(step.spikes.node), &[0.0]);
    }

    #[test]
    fn leak_decays_toward_reset_monotonically() {
        let cfg = LifConfig::default();
        let mut t = scalar_tape();
        let x = t.full(Shape::new(&[1]).unwrap(), 0.0).unwrap();
        let mut v = one(&mut t, 0.9);
        let mut last = 0.9;
        for _ in 0..6 {
            let step = lif_step(&mut t, &cfg, x, v).unwrap();
            let cur = t.values(step.v_next)[0];
            assert!(cur < last && cur >= cfg.v_reset, "decay {last} -> {cur}");
            last = cur;
            v = step.v_next;
        }
    }

    #[test]
    fn reset_is_exact_after_spike() {
        let cfg = LifConfig {
            tau: 2.0,
            v_th: 1.0,
            v_reset: -0.125,
        };
        let mut t = scalar_tape();
        let x = one(&mut t, 5.0);
        let v = one(&mut t, 0.7);
        let step = lif_step(&mut t, &cfg, x, v).unwrap();
        assert_eq!(t.values(step.spikes.node), &[1.0]);
        // Bitwise equality: the reset writes v_reset, no residue.
        assert_eq!(t.values(step.v_next), &[-0.125]);
    }

    #[test]
    fn reset_path_participates_in_backward() {
        // Out of the surrogate window (H = 2.0, S = 1 frozen):
        // dV'/dH = 1 - S = 0, so the gradient through V' w.r.t. X vanishes.
        let cfg = LifConfig::default();
        let mut t = scalar_tape();
        let x = one(&mut t, 4.0);
        let v = one(&mut t, 0.0);
        let step = lif_step(&mut t, &cfg, x, v).unwrap();
        let s = t.reduce_sum(step.v_next, 0, false).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x), &[0.0]);

        // Inside the window (H = 0.6, S = 0): dV'/dH = (1 - S) + (v_reset - H)/v_th
        // = 1 - 0.6 = 0.4, and dH/dX = 1/tau = 0.5 -> 0.2.
        let mut t2 = scalar_tape();
        let x2 = one(&mut t2, 1.2);
        let v2 = one(&mut t2, 0.0);
        let step2 = lif_step(&mut t2, &cfg, x2, v2).unwrap();
        let s2 = t2.reduce_sum(step2.v_next, 0, false).unwrap();
        t2.backward(s2).unwrap();
        assert!((t2.grad(x2)[0] - 0.2).abs() < 1e-12, "{}", t2.grad(x2)[0]);
    }

    #[test]
    fn sequence_of_one_step_matches_single_step() {
        let cfg = LifConfig::default();
        let mut t = scalar_tape();
        let x = t
            .leaf(Shape::new(&[1, 3]).unwrap(), vec![2.0, 0.5, 1.9], true)
            .unwrap();
        let (spikes, state) = run_sequence(&mut t, &cfg, x, None).unwrap();
        assert_eq!(t.values(spikes.node), &[1.0, 0.0, 0.0]);
        assert_eq!(t.values(state.v)[0], 0.0);
        assert_eq!(t.values(state.v)[1], 0.25);
        assert_eq!(state.h_trace.len(), 1);
    }

    #[test]
    fn constant_drive_at_tau_times_threshold_fires_every_step() {
        let cfg = LifConfig::default();
        let mut t = scalar_tape();
        let x = t
            .leaf(Shape::new(&[5, 1]).unwrap(), vec![2.0; 5], true)
            .unwrap();
        let (spikes, _) = run_sequence(&mut t, &cfg, x, None).unwrap();
        assert_eq!(t.values(spikes.node), &[1.0; 5]);
    }

    #[test]
    fn known_three_step_trace() {
        // tau=2, drive 0.9 each step from V=0:
        // t1: H=0.45, no spike, V=0.45
        // t2: H=0.45/2+0.45=0.675, no spike, V=0.675
        // t3: H=0.675/2+0.45=0.7875, no spike.
        let cfg = LifConfig::default();
        let mut t = scalar_tape();
        let x = t
            .leaf(Shape::new(&[3, 1]).unwrap(), vec![0.9; 3], true)
            .unwrap();
        let (spikes, state) = run_sequence(&mut t, &cfg, x, None).unwrap();
        assert_eq!(t.values(spikes.node), &[0.0; 3]);
        let hs: Vec<f64> = state.h_trace.iter().map(|&h| t.values(h)[0]).collect();
        assert!((hs[0] - 0.45).abs() < 1e-15);
        assert!((hs[1] - 0.675).abs() < 1e-15);
        assert!((hs[2] - 0.7875).abs() < 1e-15);
    }

    #[test]
    fn spike_tensor_audit_rejects_non_binary() {
        let mut t = scalar_tape();
        let x = t
            .constant(Shape::new(&[2]).unwrap(), vec![1.0, 0.5])
            .unwrap();
        assert!(SpikeTensor::from_node(&t, x, "test").is_err());
    }

    #[test]
    fn direct_drive_fires_on_arrival() {
        // A unit drive must cross a unit threshold on the step it arrives;
        // under the scaled convention the same drive only charges to 1/tau.
        let cfg = LifConfig::default();
        let mut t = scalar_tape();
        let x = t
            .leaf(Shape::new(&[1, 2]).unwrap(), vec![1.0, 2.0], true)
            .unwrap();
        let v = t.full(Shape::new(&[1, 2]).unwrap(), 0.0).unwrap();
        let step = lif_step_with(&mut t, &cfg, Drive::Direct, x, v).unwrap();
        assert_eq!(t.values(step.spikes.node), &[1.0, 1.0]);
        assert_eq!(t.values(step.h), &[1.0, 2.0]);
        let step2 = lif_step(&mut t, &cfg, x, v).unwrap();
        assert_eq!(t.values(step2.spikes.node), &[0.0, 1.0]);
    }

    #[test]
    fn direct_drive_state_still_leaks() {
        // H[2] = leak * V[1] + X[2]: after a sub-threshold charge of 0.6 the
        // retained half carries over while the new drive enters whole.
        let cfg = LifConfig::default();
        let mut t = scalar_tape();
        let x = t
            .leaf(Shape::new(&[2, 1]).unwrap(), vec![0.6, 0.3], true)
            .unwrap();
        let (spikes, state) = run_sequence_with(&mut t, &cfg, Drive::Direct, x, None).unwrap();
        assert_eq!(t.values(spikes.node), &[0.0, 0.0]);
        let h2 = t.values(state.h_trace[1])[0];
        assert!((h2 - (0.5 * 0.6 + 0.3)).abs() < 1e-15);
    }

    #[test]
    fn gradients_flow_through_time() {
        // With sub-threshold drive the chain V[t] -> H[t+1] is linear:
        // dH[3]/dX[1] = (1/tau) * leak^2 when no unit is in the surrogate
        // window... choose drives below half-threshold to stay out of it.
        let cfg = LifConfig::default();
        let mut t = scalar_tape();
        let x = t
            .leaf(Shape::new(&[3, 1]).unwrap(), vec![0.4, 0.0, 0.0], true)
            .unwrap();
        let (_, state) = run_sequence(&mut t, &cfg, x, None).unwrap();
        let h_last = state.h_trace[2];
        let s = t.reduce_sum(h_last, 0, false).unwrap();
        let s = t.reduce_sum(s, 0, false).unwrap();
        t.backward(s).unwrap();
        // H chain: H1=0.2 (out of window), V1=0.2, H2=0.1, V2=0.1, H3=0.05.
        // dH3/dX1 = (1/2) * (1/2) * (1/2) = 0.125.
        assert!((t.grad(x)[0] - 0.125).abs() < 1e-12, "{}", t.grad(x)[0]);
    }
}
