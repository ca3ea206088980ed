//! The clamp variance bound, checked by simulation: spike-gated modulation
//! `Y = X . M` with `X ~ Bernoulli(f)` and `M` supported on `[b, a]` obeys a
//! piecewise bound in `f`, tight above the breakpoint `(a+b)/(2a)`.
//!
//!     cargo run --release --example variance_bounds

use tdsnn::analysis::{
    bound_breakpoint, clamp_variance_bound, two_point_weight, verify_bound_mc, AdversarialLaw,
};
use tdsnn::Result;

fn main() -> Result<()> {
    const SAMPLES: usize = 50_000;
    let (a, b) = (1.5, 0.0);
    let fstar = bound_breakpoint(a, b);
    println!("clamp range [{b}, {a}], breakpoint f* = {fstar}\n");
    println!("   f   |  bound  | two-point |   uniform |  constant | tight?");
    println!("-------+---------+-----------+-----------+-----------+-------");
    let mut f = 0.1;
    let mut cell = 0;
    while f < 1.0 {
        let bound = clamp_variance_bound(a, b, f)?;
        let mut cols = Vec::new();
        for law in [
            AdversarialLaw::TwoPoint,
            AdversarialLaw::Uniform,
            AdversarialLaw::Deterministic,
        ] {
            cell += 1;
            let r = verify_bound_mc(a, b, f, law, SAMPLES, 7_000 + cell)?;
            cols.push(if r.applicable {
                format!("{:>9.5}", r.empirical)
            } else {
                format!("{:>9}", "-")
            });
        }
        let p = two_point_weight(a, b, f);
        let tight = (0.0..=1.0).contains(&p);
        println!(
            "  {f:.2} | {bound:.5} | {} | {} | {} | {}",
            cols[0],
            cols[1],
            cols[2],
            if tight { "two-point attains it" } else { "" }
        );
        f += 0.1;
    }
    println!(
        "\nBelow f* no single modulation law reaches the bound (the worst case\n\
         needs correlation between the map and the spikes); at f* the constant\n\
         map M = a attains it, and above f* the two-point law with weight\n\
         p = (a + b - 2bf) / (2f(a - b)) on M = a attains it exactly."
    );

    // Demonstrate the two equality constructions numerically.
    let at_star = verify_bound_mc(a, b, fstar, AdversarialLaw::Deterministic, SAMPLES, 1)?;
    println!(
        "\nconstant map at f* = {fstar}: empirical {:.5} vs bound {:.5} ({:+.2}%)",
        at_star.empirical,
        at_star.bound,
        100.0 * (at_star.empirical - at_star.bound) / at_star.bound
    );
    let above = verify_bound_mc(a, b, 0.8, AdversarialLaw::TwoPoint, SAMPLES, 2)?;
    println!(
        "two-point law at f = 0.8:  empirical {:.5} vs bound {:.5} ({:+.2}%)",
        above.empirical,
        above.bound,
        100.0 * (above.empirical - above.bound) / above.bound
    );
    Ok(())
}
