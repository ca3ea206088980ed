//! Finite-difference gradient checking.
//!
//! The checker is deliberately independent of the backward pass: it evaluates
//! the user-supplied forward builder twice per perturbed element (central
//! differences) and compares the quotient against the analytic gradient from
//! one `backward` call. It is the reference oracle for every differentiable
//! op in the engine and is exported so downstream tests can reuse it.

use crate::error::Result;

use super::shape::Shape;
use super::tape::{NodeId, Precision, Tape};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-4;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst scaled error over all inputs: `|analytic - numeric| /
    /// max(1, |analytic|, |numeric|)`.
    pub max_rel_err: f64,
    /// Number of scalar inputs checked.
    pub checked: usize,
}

/// Check the gradients of a scalar-valued tape program.
///
/// `build` receives a fresh 64-bit tape plus one differentiable leaf per
/// entry of `inputs` and must return a scalar output node. The closure is
/// re-invoked for every perturbed evaluation, so it must be deterministic in
/// the leaf values.
pub fn check_scalar_fn(
    inputs: &[(Shape, Vec<f64>)],
    step: f64,
    build: impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
) -> Result<GradCheckReport> {
    // Analytic gradients from one reverse sweep.
    let mut tape = Tape::new(Precision::F64);
    let leaf_ids: Vec<NodeId> = inputs
        .iter()
        .map(|(s, v)| tape.leaf(s.clone(), v.clone(), true))
        .collect::<Result<_>>()?;
    let out = build(&mut tape, &leaf_ids)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = leaf_ids.iter().map(|&id| tape.grad(id).to_vec()).collect();

    // Forward-only evaluation helper.
    let eval = |vals: &[Vec<f64>]| -> Result<f64> {
        let mut t = Tape::new(Precision::F64);
        let ids: Vec<NodeId> = inputs
            .iter()
            .zip(vals)
            .map(|((s, _), v)| t.leaf(s.clone(), v.clone(), false))
            .collect::<Result<_>>()?;
        let o = build(&mut t, &ids)?;
        Ok(t.values(o)[0])
    };

    let base: Vec<Vec<f64>> = inputs.iter().map(|(_, v)| v.clone()).collect();
    let mut max_rel_err: f64 = 0.0;
    let mut checked = 0usize;
    for (li, vals) in base.iter().enumerate() {
        for ei in 0..vals.len() {
            let mut plus = base.clone();
            plus[li][ei] += step;
            let mut minus = base.clone();
            minus[li][ei] -= step;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let a = analytic[li][ei];
            let denom = 1.0_f64.max(a.abs()).max(numeric.abs());
            max_rel_err = max_rel_err.max((a - numeric).abs() / denom);
            checked += 1;
        }
    }
    Ok(GradCheckReport { max_rel_err, checked })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_has_exact_linear_gradient() {
        // f(x) = sum(x*x); central differences are exact for quadratics up
        // to rounding.
        let shape = Shape::new(&[3]).unwrap();
        let rep = check_scalar_fn(
            &[(shape, vec![0.5, -1.25, 2.0])],
            DEFAULT_STEP,
            |t, ids| {
                let sq = t.hadamard(ids[0], ids[0])?;
                t.reduce_sum(sq, 0, false)
            },
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-9, "err {}", rep.max_rel_err);
        assert_eq!(rep.checked, 3);
    }
}
