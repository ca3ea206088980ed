//! Leaky integrate-and-fire basics: a membrane trace under constant drive,
//! the hard reset, the two drive conventions, and the rectangular surrogate
//! window the backward pass uses in place of the step function.
//!
//!     cargo run --release --example lif_dynamics

use tdsnn::neuron::{lif_step_with, Drive, LifConfig};
use tdsnn::tensor::{Precision, Shape, Tape};
use tdsnn::Result;

fn trace(cfg: &LifConfig, drive: Drive, x: f64, steps: usize) -> Result<Vec<(f64, f64, f64)>> {
    let mut tape = Tape::new(Precision::F64);
    let shape = Shape::new(&[1])?;
    let mut v = tape.constant(shape.clone(), vec![cfg.v_reset])?;
    let mut rows = Vec::new();
    for _ in 0..steps {
        let xin = tape.constant(shape.clone(), vec![x])?;
        let step = lif_step_with(&mut tape, cfg, drive, xin, v)?;
        rows.push((
            tape.values(step.h)[0],
            tape.values(step.spikes.node)[0],
            tape.values(step.v_next)[0],
        ));
        v = step.v_next;
    }
    Ok(rows)
}

fn main() -> Result<()> {
    let cfg = LifConfig {
        tau: 2.0,
        v_th: 1.0,
        v_reset: 0.0,
    };
    println!(
        "LIF with tau = {}, threshold = {}, reset = {}\n",
        cfg.tau, cfg.v_th, cfg.v_reset
    );

    // Constant drive, direct convention (what the network layers use):
    // H[t] = (1 - 1/tau) V[t-1] + X[t], spike and hard-reset at threshold.
    for &x in &[0.4, 0.6, 1.0] {
        println!("direct drive x = {x}:");
        println!("  step |      H      | S |   V'");
        for (t, (h, s, v)) in trace(&cfg, Drive::Direct, x, 8)?.iter().enumerate() {
            println!("  {t:>4} | {h:>11.6} | {s:>1} | {v:>8.5}", s = *s as u8);
        }
        let rows = trace(&cfg, Drive::Direct, x, 64)?;
        let rate = rows.iter().map(|r| r.1).sum::<f64>() / rows.len() as f64;
        println!("  long-run firing rate: {rate:.4}\n");
    }

    // The scaled convention divides the drive by tau, so the same input
    // charges the membrane more slowly.
    let direct = trace(&cfg, Drive::Direct, 0.8, 32)?;
    let scaled = trace(&cfg, Drive::Scaled, 0.8, 32)?;
    let rate = |rows: &[(f64, f64, f64)]| {
        rows.iter().map(|r| r.1).sum::<f64>() / rows.len() as f64
    };
    println!(
        "same x = 0.8 under both conventions: direct fires at {:.3}, scaled at {:.3}\n",
        rate(&direct),
        rate(&scaled)
    );

    // The surrogate window: forward is the exact step S = 1(H >= vth), but
    // the backward pass uses a rectangle, dS/dH = (1/vth) on
    // (vth/2, 3 vth/2) and zero outside. Note the window is open at both
    // ends and is centred on the threshold, so gradient flows for states
    // that nearly fired as well as ones that just fired.
    println!("surrogate window sweep (vth = {}):", cfg.v_th);
    println!("      H   | S | dS/dH");
    for h0 in [-0.5, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75] {
        let mut tape = Tape::new(Precision::F64);
        let h = tape.leaf(Shape::new(&[1])?, vec![h0], true)?;
        let s = tape.spike(h, cfg.v_th)?;
        tape.backward(s)?;
        println!(
            "  {h0:>6.2}  | {} | {:.3}",
            tape.values(s)[0] as u8,
            tape.grad(h)[0]
        );
    }
    Ok(())
}
