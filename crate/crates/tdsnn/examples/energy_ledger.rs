//! Synaptic-operation accounting on the desk-scale default model: per-site
//! dense MAC counts, spike-gated accumulate counts, firing rates, and the
//! resulting energy estimate with the feedback apparatus priced separately.
//!
//!     cargo run --release --example energy_ledger

use tdsnn::analysis::{energy_report, instrumented_forward, E_AC_PJ, E_MAC_PJ};
use tdsnn::data::{synth_dataset, DatasetConfig, DatasetKind};
use tdsnn::model::{ModelConfig, SpikingTransformer};
use tdsnn::tensor::{ParamStore, Precision};
use tdsnn::Result;

fn main() -> Result<()> {
    let mcfg = ModelConfig::default();
    let mut store = ParamStore::new();
    let model = SpikingTransformer::new(&mut store, mcfg.clone())?;
    let dcfg = DatasetConfig {
        kind: DatasetKind::TemporalXor,
        samples: 64,
        t: mcfg.t,
        tokens: mcfg.tokens,
        in_dim: mcfg.in_dim,
        num_classes: mcfg.num_classes,
        seed: 11,
        ..DatasetConfig::default()
    };
    let dataset = synth_dataset(&dcfg)?;
    let idx: Vec<usize> = (0..dataset.len()).collect();

    let tape = instrumented_forward(&model, &mut store, &dataset, &idx, Precision::F64)?;
    let ledger = energy_report(&tape, E_MAC_PJ, E_AC_PJ)?;

    println!(
        "{:<22} {:>12} {:>12} {:>8} {:>9} {:>14}",
        "site", "macs", "accs", "rate", "feedback", "energy_pj"
    );
    for row in &ledger.rows {
        println!(
            "{:<22} {:>12} {:>12} {:>8} {:>9} {:>14.1}",
            row.name,
            row.macs,
            row.accs,
            row.rate.map(|r| format!("{r:.3}")).unwrap_or_default(),
            row.feedback,
            row.accs as f64 * ledger.e_ac_pj,
        );
    }
    println!();
    println!("spiking baseline     {:>14.1} pJ", ledger.baseline_pj);
    println!("feedback apparatus   {:>14.1} pJ", ledger.feedback_pj);
    println!("total                {:>14.1} pJ", ledger.total_pj());
    println!(
        "feedback overhead    {:>13.2}%",
        100.0 * ledger.overhead_fraction()
    );
    println!(
        "analog equivalent    {:>14.1} pJ  ({:.1}x the spiking cost)",
        ledger.analog_pj(),
        ledger.analog_pj() / ledger.total_pj()
    );
    Ok(())
}
