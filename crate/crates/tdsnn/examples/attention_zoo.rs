//! Every spiking attention core on the same random spike train: output
//! firing rates and per-variant synaptic work. The value-free query-key
//! kinds do strictly less work than the score-times-value family.
//!
//!     cargo run --release --example attention_zoo

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdsnn::attention::{attention_core, AttentionConfig, AttentionKind};
use tdsnn::neuron::{LifConfig, SpikeTensor};
use tdsnn::tensor::{NodeId, Precision, Shape, Tape};
use tdsnn::Result;

fn bernoulli(tape: &mut Tape, rng: &mut ChaCha8Rng, dims: &[usize], rate: f64) -> Result<NodeId> {
    let shape = Shape::new(dims)?;
    let vals = (0..shape.numel())
        .map(|_| if rng.gen::<f64>() < rate { 1.0 } else { 0.0 })
        .collect();
    tape.constant(shape, vals)
}

fn main() -> Result<()> {
    // One shared [T, B, N, C] spike train for Q, K and V.
    let (t, b, n, c) = (4, 2, 8, 16);
    let kinds = [
        AttentionKind::Ssa,
        AttentionKind::Sdsa1,
        AttentionKind::Sdsa2,
        AttentionKind::QkToken,
        AttentionKind::QkChannel,
    ];
    println!("input: [T={t}, B={b}, N={n}, C={c}], q/k/v rates 0.30/0.25/0.20, 2 heads\n");
    println!("{:<12} | out rate |      MACs |      ACCs | needs V", "kind");
    println!("{:-<12}-+----------+-----------+-----------+--------", "");
    for kind in kinds {
        let mut tape = Tape::new(Precision::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let q = bernoulli(&mut tape, &mut rng, &[t, b, n, c], 0.30)?;
        let k = bernoulli(&mut tape, &mut rng, &[t, b, n, c], 0.25)?;
        let v = bernoulli(&mut tape, &mut rng, &[t, b, n, c], 0.20)?;
        let q = SpikeTensor::from_node(&tape, q, "zoo")?;
        let k = SpikeTensor::from_node(&tape, k, "zoo")?;
        let v = SpikeTensor::from_node(&tape, v, "zoo")?;
        let cfg = AttentionConfig {
            kind,
            dim: c,
            heads: 2,
            scale: if kind.needs_scale() { Some(0.25) } else { None },
            lif: LifConfig::default(),
        };
        tape.push_scope("core");
        let out = attention_core(
            &mut tape,
            &cfg,
            &q,
            &k,
            if kind.uses_value() { Some(&v) } else { None },
        )?;
        tape.pop_scope();
        let counts = tape.scope_counts("core").expect("scoped ops");
        println!(
            "{:<12} |   {:.4} | {:>9} | {:>9} | {}",
            kind.to_string(),
            out.rate(&tape),
            counts.macs,
            counts.accs,
            if kind.uses_value() { "yes" } else { "no" }
        );
    }
    println!(
        "\nMACs count the dense multiply-accumulate positions; ACCs count the\n\
         additions actually performed given the spike patterns (binary\n\
         operands make every product a gated add). The query-key kinds skip\n\
         the value path, which is where most of the work lives."
    );
    Ok(())
}
