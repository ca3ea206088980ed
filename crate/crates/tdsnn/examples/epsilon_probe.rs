//! Temporal gradient sensitivity of a soft-reset neuron: how much of
//! `dH[t+1]/dH[t]` survives the spike-and-reset, with and without a feedback
//! branch, measured by autodiff and compared to the closed forms.
//!
//!     cargo run --release --example epsilon_probe

use tdsnn::analysis::{epsilon_baseline, epsilon_feedback, epsilon_probe, gradient_flow_probe};
use tdsnn::neuron::LifConfig;
use tdsnn::Result;

fn main() -> Result<()> {
    let cfg = LifConfig {
        tau: 2.0,
        v_th: 1.0,
        v_reset: 0.0,
    };
    println!(
        "one-step sensitivity dH[t+1]/dH[t], tau = {}, threshold = {}\n",
        cfg.tau, cfg.v_th
    );
    println!("    H    | in window | baseline (closed / autodiff) | theta=0.3 (closed / autodiff)");
    println!("---------+-----------+------------------------------+------------------------------");
    for h in [0.2, 0.6, 0.9, 1.1, 1.4, 1.8] {
        let in_win = h > 0.5 * cfg.v_th && h < 1.5 * cfg.v_th;
        let base_c = epsilon_baseline(h, &cfg);
        let base_m = epsilon_probe(h, 0.3, &cfg, None)?;
        let fb_c = epsilon_feedback(h, &cfg, 0.3);
        let fb_m = epsilon_probe(h, 0.3, &cfg, Some(0.3))?;
        println!(
            "  {h:>5.2}  |    {}    |      {base_c:>7.4} / {base_m:>7.4}     |      {fb_c:>7.4} / {fb_m:>7.4}",
            if in_win { "yes" } else { "no " }
        );
    }
    println!(
        "\nInside the surrogate window the baseline sensitivity collapses to 0:\n\
         the reset subtracts exactly what the surrogate credits. A feedback\n\
         branch S -> phi(S) re-injects phi'(S)/vth there, so gradients can\n\
         cross the spike. Outside the window both reduce to the leak 1 - 1/tau\n\
         = {:.2} below threshold (no surrogate, no reset gradient).\n",
        1.0 - 1.0 / cfg.tau
    );

    // Multi-step: hold every state in the window for T steps and measure the
    // full Jacobian dH[T]/dH[1].
    println!("multi-step Jacobian with every state in the window:");
    println!("  steps | theta | baseline | feedback (measured / expected)");
    for steps in [2, 4, 8] {
        for theta in [0.05, 0.2, 1.0] {
            let r = gradient_flow_probe(&cfg, steps, theta)?;
            println!(
                "    {steps:>3} | {theta:>5.2} | {:>8} | {:.3e} / {:.3e}",
                r.baseline, r.feedback, r.feedback_expected
            );
        }
    }
    println!(
        "\nThe baseline Jacobian is exactly zero however many steps are chained;\n\
         with feedback it is (theta / vth)^(T-1) — small, but nonzero, which is\n\
         what lets training assign credit across time."
    );
    Ok(())
}
