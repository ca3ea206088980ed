//! Unit-level checks for the autodiff engine: hand-computable cases, the
//! finite-difference oracle on every differentiable op, and the accumulation
//! / determinism contracts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdsnn::tensor::gradcheck::{check_scalar_fn, DEFAULT_STEP};
use tdsnn::tensor::{BnMode, Precision, Shape, Tape};

fn shape(d: &[usize]) -> Shape {
    Shape::new(d).unwrap()
}

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[test]
fn matmul_identity_preserves_input() {
    let mut t = Tape::new(Precision::F64);
    let eye = t
        .constant(shape(&[3, 3]), vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
        .unwrap();
    let x = t
        .constant(shape(&[3, 4]), (0..12).map(|i| i as f64 * 0.5 - 2.0).collect())
        .unwrap();
    let y = t.matmul(eye, x).unwrap();
    assert_eq!(t.values(y), t.values(x));
}

#[test]
fn matmul_degenerate_one_by_one() {
    let mut t = Tape::new(Precision::F64);
    let a = t.constant(shape(&[1, 1]), vec![-3.0]).unwrap();
    let b = t.constant(shape(&[1, 1]), vec![2.5]).unwrap();
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.values(c), &[-7.5]);
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = randn(&mut rng, 4 * 5);
    let b = randn(&mut rng, 5 * 3);
    let rep = check_scalar_fn(
        &[(shape(&[4, 5]), a), (shape(&[5, 3]), b)],
        DEFAULT_STEP,
        |t, ids| {
            let c = t.matmul(ids[0], ids[1])?;
            let s0 = t.reduce_sum(c, 0, false)?;
            t.reduce_sum(s0, 0, false)
        },
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-5, "err {}", rep.max_rel_err);
}

#[test]
fn batched_matmul_broadcasts_batch_axes() {
    // [2, 2, 3] x [1, 3, 2]: the single right operand serves both batches.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = randn(&mut rng, 2 * 2 * 3);
    let b = randn(&mut rng, 3 * 2);
    let mut t = Tape::new(Precision::F64);
    let an = t.constant(shape(&[2, 2, 3]), a.clone()).unwrap();
    let bn = t.constant(shape(&[1, 3, 2]), b.clone()).unwrap();
    let c = t.matmul(an, bn).unwrap();
    assert_eq!(t.shape(c).dims(), &[2, 2, 2]);
    // Reference: per-batch dense products.
    for bi in 0..2 {
        for i in 0..2 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += a[bi * 6 + i * 3 + k] * b[k * 2 + j];
                }
                let got = t.values(c)[bi * 4 + i * 2 + j];
                assert!((got - s).abs() < 1e-12);
            }
        }
    }
    // And the gradient path through the broadcast operand.
    let rep = check_scalar_fn(
        &[(shape(&[2, 2, 3]), a), (shape(&[1, 3, 2]), b)],
        DEFAULT_STEP,
        |t, ids| {
            let c = t.matmul(ids[0], ids[1])?;
            let f = t.reshape(c, &[8])?;
            let sq = t.hadamard(f, f)?;
            t.reduce_sum(sq, 0, false)
        },
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-5, "err {}", rep.max_rel_err);
}

#[test]
fn hadamard_known_products_and_broadcast() {
    let mut t = Tape::new(Precision::F64);
    let a = t.constant(shape(&[2, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = t.constant(shape(&[2, 2]), vec![-1.0, 0.5, 0.0, 2.0]).unwrap();
    let c = t.hadamard(a, b).unwrap();
    assert_eq!(t.values(c), &[-1.0, 1.0, 0.0, 8.0]);

    // Broadcast a per-row map [2, 1] against [2, 3].
    let x = t
        .constant(shape(&[2, 3]), vec![1.0, 1.0, 1.0, 2.0, 2.0, 2.0])
        .unwrap();
    let m = t.constant(shape(&[2, 1]), vec![0.5, 3.0]).unwrap();
    let y = t.hadamard(x, m).unwrap();
    assert_eq!(t.values(y), &[0.5, 0.5, 0.5, 6.0, 6.0, 6.0]);
}

#[test]
fn hadamard_broadcast_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = randn(&mut rng, 2 * 4 * 3);
    let m = randn(&mut rng, 2 * 4);
    let rep = check_scalar_fn(
        &[(shape(&[2, 4, 3]), x), (shape(&[2, 4, 1]), m)],
        DEFAULT_STEP,
        |t, ids| {
            let y = t.hadamard(ids[0], ids[1])?;
            let f = t.reshape(y, &[24])?;
            let sq = t.hadamard(f, f)?;
            t.reduce_sum(sq, 0, false)
        },
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-5, "err {}", rep.max_rel_err);
}

#[test]
fn reduce_sum_axis_semantics_and_gradient() {
    let mut t = Tape::new(Precision::F64);
    let x = t
        .constant(shape(&[2, 3]), vec![1.0, 2.0, 3.0, 10.0, 20.0, 30.0])
        .unwrap();
    let s0 = t.reduce_sum(x, 0, false).unwrap();
    assert_eq!(t.shape(s0).dims(), &[3]);
    assert_eq!(t.values(s0), &[11.0, 22.0, 33.0]);
    let s1 = t.reduce_sum(x, 1, true).unwrap();
    assert_eq!(t.shape(s1).dims(), &[2, 1]);
    assert_eq!(t.values(s1), &[6.0, 60.0]);

    // Gradient of sum broadcasts ones back over the reduced axis.
    let mut t2 = Tape::new(Precision::F64);
    let x2 = t2
        .leaf(shape(&[2, 3]), vec![1.0, 2.0, 3.0, 10.0, 20.0, 30.0], true)
        .unwrap();
    let s = t2.reduce_sum(x2, 0, false).unwrap();
    let tot = t2.reduce_sum(s, 0, false).unwrap();
    t2.backward(tot).unwrap();
    assert_eq!(t2.grad(x2), &[1.0; 6]);
}

#[test]
fn clamp_values_and_subgradient_mask() {
    let mut t = Tape::new(Precision::F64);
    let x = t.leaf(shape(&[3]), vec![-0.3, 0.4, 2.5], true).unwrap();
    let y = t.clamp(x, 0.0, 1.5).unwrap();
    assert_eq!(t.values(y), &[0.0, 0.4, 1.5]);
    let s = t.reduce_sum(y, 0, false).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x), &[0.0, 1.0, 0.0]);
}

#[test]
fn clamp_gradient_matches_finite_differences_away_from_kinks() {
    // Keep every input at least 10 steps away from the clamp bounds so the
    // central difference never straddles a kink.
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let xs: Vec<f64> = (0..12)
        .map(|_| {
            let mut v: f64 = rng.gen_range(-1.0..2.5);
            for bound in [0.0, 1.5] {
                if (v - bound).abs() < 10.0 * DEFAULT_STEP {
                    v += 0.05;
                }
            }
            v
        })
        .collect();
    let rep = check_scalar_fn(&[(shape(&[12]), xs)], DEFAULT_STEP, |t, ids| {
        let y = t.clamp(ids[0], 0.0, 1.5)?;
        let sq = t.hadamard(y, y)?;
        t.reduce_sum(sq, 0, false)
    })
    .unwrap();
    assert!(rep.max_rel_err < 1e-5, "err {}", rep.max_rel_err);
}

#[test]
fn concat_routes_gradients_to_parts() {
    let mut t = Tape::new(Precision::F64);
    let a = t.leaf(shape(&[2, 2]), vec![1.0, 2.0, 3.0, 4.0], true).unwrap();
    let b = t.leaf(shape(&[2, 3]), vec![5.0; 6], true).unwrap();
    let c = t.concat(a, b, 1).unwrap();
    assert_eq!(t.shape(c).dims(), &[2, 5]);
    assert_eq!(
        t.values(c),
        &[1.0, 2.0, 5.0, 5.0, 5.0, 3.0, 4.0, 5.0, 5.0, 5.0]
    );
    // Weight each output position differently, then check routing.
    let w = t
        .constant(shape(&[2, 5]), (1..=10).map(|i| i as f64).collect())
        .unwrap();
    let prod = t.hadamard(c, w).unwrap();
    let flat = t.reshape(prod, &[10]).unwrap();
    let s = t.reduce_sum(flat, 0, false).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(a), &[1.0, 2.0, 6.0, 7.0]);
    assert_eq!(t.grad(b), &[3.0, 4.0, 5.0, 8.0, 9.0, 10.0]);
}

#[test]
fn linear_zero_weight_returns_bias() {
    let mut t = Tape::new(Precision::F64);
    let x = t.constant(shape(&[2, 3]), vec![1.0; 6]).unwrap();
    let w = t.constant(shape(&[3, 2]), vec![0.0; 6]).unwrap();
    let b = t.constant(shape(&[2]), vec![0.7, -0.2]).unwrap();
    let y = t.linear(x, w, Some(b)).unwrap();
    assert_eq!(t.values(y), &[0.7, -0.2, 0.7, -0.2]);
}

#[test]
fn linear_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = randn(&mut rng, 2 * 4 * 3);
    let w = randn(&mut rng, 3 * 5);
    let b = randn(&mut rng, 5);
    let rep = check_scalar_fn(
        &[
            (shape(&[2, 4, 3]), x),
            (shape(&[3, 5]), w),
            (shape(&[5]), b),
        ],
        DEFAULT_STEP,
        |t, ids| {
            let y = t.linear(ids[0], ids[1], Some(ids[2]))?;
            let f = t.reshape(y, &[40])?;
            let sq = t.hadamard(f, f)?;
            t.reduce_sum(sq, 0, false)
        },
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-5, "err {}", rep.max_rel_err);
}

#[test]
fn batch_norm_constant_input_returns_shift() {
    let mut t = Tape::new(Precision::F64);
    let x = t.constant(shape(&[8, 3]), vec![2.5; 24]).unwrap();
    let gamma = t.constant(shape(&[3]), vec![1.0; 3]).unwrap();
    let beta = t.constant(shape(&[3]), vec![0.1, -0.5, 0.0]).unwrap();
    let (y, stats) = t
        .batch_norm(x, gamma, beta, 1, 1e-5, BnMode::Batch)
        .unwrap();
    let stats = stats.unwrap();
    assert_eq!(stats.mean, vec![2.5; 3]);
    assert_eq!(stats.var, vec![0.0; 3]);
    for r in 0..8 {
        let row = &t.values(y)[r * 3..(r + 1) * 3];
        for (got, want) in row.iter().zip(&[0.1, -0.5, 0.0]) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }
}

#[test]
fn batch_norm_standardizes_large_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let n = 4096;
    let x: Vec<f64> = (0..n * 2)
        .map(|_| {
            // Box-Muller standard normal.
            let u: f64 = rng.gen_range(1e-12..1.0);
            let v: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            (-2.0 * u.ln()).sqrt() * v.cos()
        })
        .collect();
    let mut t = Tape::new(Precision::F64);
    let xn = t.constant(shape(&[n, 2]), x).unwrap();
    let gamma = t.constant(shape(&[2]), vec![1.0, 1.0]).unwrap();
    let beta = t.constant(shape(&[2]), vec![0.0, 0.0]).unwrap();
    let (y, _) = t
        .batch_norm(xn, gamma, beta, 1, 1e-5, BnMode::Batch)
        .unwrap();
    for ch in 0..2 {
        let vals: Vec<f64> = t.values(y).iter().skip(ch).step_by(2).cloned().collect();
        let mean: f64 = vals.iter().sum::<f64>() / n as f64;
        let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}

#[test]
fn batch_norm_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = randn(&mut rng, 6 * 3);
    let gamma: Vec<f64> = (0..3).map(|_| rng.gen_range(0.5..1.5)).collect();
    let beta = randn(&mut rng, 3);
    let rep = check_scalar_fn(
        &[
            (shape(&[6, 3]), x),
            (shape(&[3]), gamma),
            (shape(&[3]), beta),
        ],
        DEFAULT_STEP,
        |t, ids| {
            let (y, _) = t.batch_norm(ids[0], ids[1], ids[2], 1, 1e-5, BnMode::Batch)?;
            let f = t.reshape(y, &[18])?;
            let sq = t.hadamard(f, f)?;
            t.reduce_sum(sq, 0, false)
        },
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-4, "err {}", rep.max_rel_err);
}

#[test]
fn batch_norm_eval_mode_uses_supplied_statistics() {
    let mut t = Tape::new(Precision::F64);
    let x = t.constant(shape(&[2, 2]), vec![1.0, 4.0, 3.0, 8.0]).unwrap();
    let gamma = t.constant(shape(&[2]), vec![1.0, 2.0]).unwrap();
    let beta = t.constant(shape(&[2]), vec![0.0, 1.0]).unwrap();
    let (y, stats) = t
        .batch_norm(
            x,
            gamma,
            beta,
            1,
            0.0,
            BnMode::Running {
                mean: vec![1.0, 4.0],
                var: vec![4.0, 16.0],
            },
        )
        .unwrap();
    assert!(stats.is_none());
    let got = t.values(y);
    // Channel 0: (x-1)/2; channel 1: 2*(x-4)/4 + 1.
    assert!((got[0] - 0.0).abs() < 1e-12);
    assert!((got[1] - 1.0).abs() < 1e-12);
    assert!((got[2] - 1.0).abs() < 1e-12);
    assert!((got[3] - 3.0).abs() < 1e-12);
}

#[test]
fn permute_and_transpose_round_trip_with_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let x = randn(&mut rng, 2 * 3 * 4);
    let rep = check_scalar_fn(&[(shape(&[2, 3, 4]), x.clone())], DEFAULT_STEP, |t, ids| {
        let p = t.permute(ids[0], &[2, 0, 1])?;
        let f = t.reshape(p, &[24])?;
        let sq = t.hadamard(f, f)?;
        t.reduce_sum(sq, 0, false)
    })
    .unwrap();
    assert!(rep.max_rel_err < 1e-5);

    let mut t = Tape::new(Precision::F64);
    let a = t.constant(shape(&[2, 3, 4]), x.clone()).unwrap();
    let tr = t.transpose_last(a).unwrap();
    let back = t.transpose_last(tr).unwrap();
    assert_eq!(t.values(back), &x[..]);
}

#[test]
fn slice_scatter_gradient() {
    let mut t = Tape::new(Precision::F64);
    let x = t.leaf(shape(&[4, 2]), (0..8).map(|i| i as f64).collect(), true).unwrap();
    let mid = t.slice_axis0(x, 1, 2).unwrap();
    assert_eq!(t.values(mid), &[2.0, 3.0, 4.0, 5.0]);
    let flat = t.reshape(mid, &[4]).unwrap();
    let s = t.reduce_sum(flat, 0, false).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x), &[0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
}

#[test]
fn maximum_routes_gradient_to_larger_input() {
    let mut t = Tape::new(Precision::F64);
    let a = t.leaf(shape(&[3]), vec![1.0, 0.0, 2.0], true).unwrap();
    let b = t.leaf(shape(&[3]), vec![0.5, 1.5, 2.0], true).unwrap();
    let m = t.maximum(a, b).unwrap();
    assert_eq!(t.values(m), &[1.0, 1.5, 2.0]);
    let s = t.reduce_sum(m, 0, false).unwrap();
    t.backward(s).unwrap();
    // Ties route to the first operand.
    assert_eq!(t.grad(a), &[1.0, 0.0, 1.0]);
    assert_eq!(t.grad(b), &[0.0, 1.0, 0.0]);
}

#[test]
fn cross_entropy_uniform_logits_is_log_classes() {
    let mut t = Tape::new(Precision::F64);
    let logits = t.constant(shape(&[2, 4]), vec![0.0; 8]).unwrap();
    let ce = t.cross_entropy_mean(logits, &[1, 3]).unwrap();
    assert!((t.values(ce)[0] - 4.0_f64.ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let logits = randn(&mut rng, 3 * 4);
    let rep = check_scalar_fn(&[(shape(&[3, 4]), logits)], DEFAULT_STEP, |t, ids| {
        t.cross_entropy_mean(ids[0], &[0, 2, 3])
    })
    .unwrap();
    assert!(rep.max_rel_err < 1e-5, "err {}", rep.max_rel_err);
}

#[test]
fn backward_twice_accumulates_exactly_double() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let xv = randn(&mut rng, 6);
    let mut t = Tape::new(Precision::F64);
    let x = t.leaf(shape(&[6]), xv, true).unwrap();
    let sq = t.hadamard(x, x).unwrap();
    let s = t.reduce_sum(sq, 0, false).unwrap();
    t.backward(s).unwrap();
    let once = t.grad(x).to_vec();
    t.backward(s).unwrap();
    let twice = t.grad(x).to_vec();
    for (a, b) in once.iter().zip(&twice) {
        assert_eq!(*b, 2.0 * *a, "accumulation must be exact");
    }
}

#[test]
fn evaluation_is_deterministic_bitwise() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let a = randn(&mut rng, 4 * 4);
        let b = randn(&mut rng, 4 * 4);
        let mut t = Tape::new(Precision::F64);
        let an = t.leaf(shape(&[4, 4]), a, true).unwrap();
        let bn = t.leaf(shape(&[4, 4]), b, true).unwrap();
        let c = t.matmul(an, bn).unwrap();
        let f = t.reshape(c, &[16]).unwrap();
        let sq = t.hadamard(f, f).unwrap();
        let s = t.reduce_sum(sq, 0, false).unwrap();
        t.backward(s).unwrap();
        (
            t.values(s).to_vec(),
            t.grad(an).to_vec(),
            t.grad(bn).to_vec(),
        )
    };
    let (v1, g1a, g1b) = run();
    let (v2, g2a, g2b) = run();
    assert_eq!(v1, v2);
    assert_eq!(g1a, g2a);
    assert_eq!(g1b, g2b);
}

#[test]
fn f32_mode_rounds_stored_values() {
    let mut t = Tape::new(Precision::F32);
    let v = 0.1_f64; // not representable exactly in f32
    let x = t.constant(shape(&[1]), vec![v]).unwrap();
    assert_eq!(t.values(x)[0], 0.1_f32 as f64);
    let y = t.scale(x, 3.0);
    assert_eq!(t.values(y)[0], (0.1_f32 as f64 * 3.0) as f32 as f64);
}

#[test]
fn spike_forward_threshold_and_surrogate_window() {
    let mut t = Tape::new(Precision::F64);
    // Threshold inclusive at exactly v_th.
    let h = t
        .leaf(shape(&[5]), vec![0.2, 0.5, 0.9, 1.0, 1.6], true)
        .unwrap();
    let s = t.spike(h, 1.0).unwrap();
    assert_eq!(t.values(s), &[0.0, 0.0, 0.0, 1.0, 1.0]);
    let tot = t.reduce_sum(s, 0, false).unwrap();
    t.backward(tot).unwrap();
    // Window is (0.5, 1.5), open at both ends; slope 1/v_th inside.
    assert_eq!(t.grad(h), &[0.0, 0.0, 1.0, 1.0, 0.0]);
}

#[test]
fn mac_counters_track_shapes_and_sparsity() {
    let mut t = Tape::new(Precision::F64);
    t.push_scope("proj");
    let x = t
        .constant(shape(&[4, 3]), vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0])
        .unwrap();
    let w = t.constant(shape(&[3, 5]), vec![0.3; 15]).unwrap();
    let _ = t.linear(x, w, None).unwrap();
    t.pop_scope();
    let c = t.scope_counts("proj").unwrap();
    assert_eq!(c.macs, 4 * 3 * 5);
    // 5 nonzero input elements, each touching 5 outputs.
    assert_eq!(c.accs, 5 * 5);
}
