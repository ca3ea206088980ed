//! Batch command-line interface: `train`, `analyze`, and `compare`
//! subcommands that read a flat key-value config and emit CSV/SVG
//! artifacts stamped with the config hash and seed.
//!
//! Exit codes are stable: 0 success, 2 configuration error, 3 numeric
//! failure during a run.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis::{
    attention_variance, attention_variance_mc, bound_grid, dataset_features, energy_report,
    epsilon_baseline, epsilon_feedback, epsilon_probe, gradient_flow_probe, instrumented_forward,
    mi_from_dense, pm_moments, ssa_variance_exact, verify_bound_mc, AdversarialLaw, EnergyLedger,
    SsaSampling, VarianceKind,
};
use crate::config::{parse_precision, ExperimentConfig};
use crate::data::{synth_dataset, Dataset};
use crate::error::{Error, Result};
use crate::model::{
    load_checkpoint, save_checkpoint, train, SpikingTransformer, TrainReport,
};
use crate::neuron::LifConfig;
use crate::report::{fmt_num, svg_heatmap, write_csv, Provenance};
use crate::tensor::ParamStore;

#[derive(Parser)]
#[command(
    name = "tdsnn",
    about = "Spiking transformer with top-down feedback: training, analysis, and paired experiments",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a config file; writes checkpoint and report CSVs.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Numerically verify one family of analytical claims.
    Analyze {
        /// Which toolkit to run.
        #[arg(value_enum)]
        kind: AnalyzeKind,
        #[command(flatten)]
        common: Common,
        /// Trained checkpoint; required for `mi` and `energy`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Paired feedback-on vs feedback-off experiment across seeds.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seed list (overrides the config's compare_seeds).
        #[arg(long)]
        seeds: Option<String>,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment config file (flat `key = value` text).
    #[arg(long)]
    config: PathBuf,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Float width of every tape: 32 or 64.
    #[arg(long)]
    precision: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AnalyzeKind {
    /// Monte Carlo check of the masked-variance bound over the (a,b,f) grid.
    Bounds,
    /// Moment ratios of the clamped spatial feedback gate.
    Moments,
    /// Closed-form vs autodiff step-to-step membrane sensitivity.
    Epsilon,
    /// Mutual information between time steps of a trained model's features.
    Mi,
    /// Synaptic-operation energy ledger of a trained model.
    Energy,
}

/// Parse the process arguments and run; the binary maps errors to exit
/// codes via [`Error::exit_code`].
pub fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Train { common } => {
            let (cfg, prov) = load(&common)?;
            cmd_train(&cfg, &prov)
        }
        Cmd::Analyze {
            kind,
            common,
            checkpoint,
        } => {
            let (cfg, prov) = load(&common)?;
            match kind {
                AnalyzeKind::Bounds => cmd_analyze_bounds(&cfg, &prov),
                AnalyzeKind::Moments => cmd_analyze_moments(&cfg, &prov),
                AnalyzeKind::Epsilon => cmd_analyze_epsilon(&cfg, &prov),
                AnalyzeKind::Mi => cmd_analyze_mi(&cfg, &prov, checkpoint.as_deref()),
                AnalyzeKind::Energy => cmd_analyze_energy(&cfg, &prov, checkpoint.as_deref()),
            }
        }
        Cmd::Compare { common, seeds } => {
            let (cfg, prov) = load(&common)?;
            let seeds = match seeds {
                Some(s) => parse_seed_list(&s)?,
                None => cfg.compare_seeds.clone(),
            };
            cmd_compare(&cfg, &prov, &seeds)
        }
    }
}

fn load(common: &Common) -> Result<(ExperimentConfig, Provenance)> {
    let mut cfg = ExperimentConfig::from_file(&common.config)?;
    let precision = match &common.precision {
        Some(p) => Some(parse_precision(p)?),
        None => None,
    };
    cfg.apply_overrides(common.seed, common.out.as_deref(), precision);
    cfg.validate()?;
    let prov = Provenance::new(cfg.hash(), cfg.seed);
    Ok((cfg, prov))
}

fn parse_seed_list(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("bad seed `{}` in --seeds", p.trim())))
        })
        .collect()
}

fn out_path(cfg: &ExperimentConfig, name: &str) -> PathBuf {
    cfg.out.join(name)
}

fn note_written(path: &Path) {
    println!("wrote {}", path.display());
}

// ───────────────────────── train ─────────────────────────

fn cmd_train(cfg: &ExperimentConfig, prov: &Provenance) -> Result<()> {
    let mcfg = cfg.resolved_model();
    let mut store = ParamStore::new();
    let model = SpikingTransformer::new(&mut store, mcfg.clone())?;
    let dataset = synth_dataset(&cfg.resolved_dataset())?;
    let schedule = mcfg.schedule()?;
    let report = train(&model, &mut store, &dataset, &schedule, &cfg.train)?;

    std::fs::create_dir_all(&cfg.out)?;
    let ck_path = out_path(cfg, "checkpoint.json");
    save_checkpoint(&ck_path, &mcfg, &store)?;
    note_written(&ck_path);
    write_train_artifacts(cfg, prov, &report)?;

    println!("final_train_acc={}", fmt_num(report.final_train_acc));
    if let Some(acc) = report.test_acc {
        println!("test_acc={}", fmt_num(acc));
    }
    eprintln!("wall_clock_s={:.1}", report.wall_clock_s);
    Ok(())
}

fn write_train_artifacts(
    cfg: &ExperimentConfig,
    prov: &Provenance,
    report: &TrainReport,
) -> Result<()> {
    let rows: Vec<Vec<String>> = report
        .epochs
        .iter()
        .map(|e| {
            vec![
                e.epoch.to_string(),
                fmt_num(e.loss),
                fmt_num(e.train_acc),
            ]
        })
        .collect();
    let p = out_path(cfg, "train_report.csv");
    write_csv(&p, prov, &["epoch", "loss", "train_acc"], &rows)?;
    note_written(&p);

    let n_stages = report
        .epochs
        .first()
        .map(|e| e.stage_losses.len())
        .unwrap_or(0);
    let stage_names: Vec<String> = (0..n_stages).map(|i| format!("stage_{i}")).collect();
    let mut header: Vec<&str> = vec!["epoch"];
    header.extend(stage_names.iter().map(|s| s.as_str()));
    let rows: Vec<Vec<String>> = report
        .epochs
        .iter()
        .map(|e| {
            let mut r = vec![e.epoch.to_string()];
            r.extend(e.stage_losses.iter().map(|v| fmt_num(*v)));
            r
        })
        .collect();
    let p = out_path(cfg, "stage_losses.csv");
    write_csv(&p, prov, &header, &rows)?;
    note_written(&p);

    let rows: Vec<Vec<String>> = vec![vec![
        fmt_num(report.final_train_acc),
        report.test_acc.map(fmt_num).unwrap_or_default(),
        report.epochs.len().to_string(),
    ]];
    let p = out_path(cfg, "train_summary.csv");
    write_csv(&p, prov, &["final_train_acc", "test_acc", "epochs"], &rows)?;
    note_written(&p);

    if !report.firing.is_empty() {
        let rows: Vec<Vec<String>> = report
            .firing
            .iter()
            .map(|(site, rate)| vec![site.clone(), fmt_num(*rate)])
            .collect();
        let p = out_path(cfg, "firing_rates.csv");
        write_csv(&p, prov, &["site", "rate"], &rows)?;
        note_written(&p);
    }
    Ok(())
}

// ───────────────────────── analyze ─────────────────────────

fn cmd_analyze_bounds(cfg: &ExperimentConfig, prov: &Provenance) -> Result<()> {
    let mut rows = Vec::new();
    let mut violations = 0usize;
    let mut cell = 0u64;
    for (a, b, f) in bound_grid() {
        for law in [
            AdversarialLaw::TwoPoint,
            AdversarialLaw::Uniform,
            AdversarialLaw::Deterministic,
        ] {
            cell += 1;
            let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(cell);
            let r = verify_bound_mc(a, b, f, law, cfg.analysis.mc_samples, seed)?;
            if r.violates() {
                violations += 1;
            }
            rows.push(vec![
                fmt_num(r.a),
                fmt_num(r.b),
                fmt_num(r.f),
                r.law.to_string(),
                r.applicable.to_string(),
                fmt_num(r.bound),
                fmt_num(r.empirical),
                fmt_num(r.sigma_hat),
                fmt_num(r.margin),
                r.violates().to_string(),
            ]);
        }
    }
    let p = out_path(cfg, "bounds.csv");
    write_csv(
        &p,
        prov,
        &[
            "a",
            "b",
            "f",
            "law",
            "applicable",
            "bound",
            "empirical_var",
            "sigma_hat",
            "margin",
            "violation",
        ],
        &rows,
    )?;
    note_written(&p);
    println!("cells={} violations={violations}", rows.len());
    Ok(())
}

fn cmd_analyze_moments(cfg: &ExperimentConfig, prov: &Provenance) -> Result<()> {
    let a = cfg.model.clamp_hi;
    let b = cfg.model.clamp_lo;
    let mut rows = Vec::new();
    for &channels in &[cfg.model.embed_c.max(2), 1024] {
        for &f in &[0.05, 0.1, 0.2] {
            let r = pm_moments(f, a, b, channels, cfg.analysis.mc_samples, cfg.seed)?;
            rows.push(vec![
                fmt_num(r.f),
                fmt_num(r.a),
                fmt_num(r.b),
                r.channels.to_string(),
                r.samples.to_string(),
                fmt_num(r.e_ratio_analytic),
                fmt_num(r.e_ratio_mc),
                fmt_num(rel_err(r.e_ratio_mc, r.e_ratio_analytic)),
                fmt_num(r.var_ratio_analytic),
                fmt_num(r.var_ratio_mc),
                fmt_num(rel_err(r.var_ratio_mc, r.var_ratio_analytic)),
                fmt_num(r.corr_mean),
                fmt_num(r.corr_mean_abs),
                fmt_num(r.corr_max_abs),
                r.regime_ok.to_string(),
            ]);
        }
    }
    let p = out_path(cfg, "moments.csv");
    write_csv(
        &p,
        prov,
        &[
            "f",
            "a",
            "b",
            "channels",
            "samples",
            "e_ratio_analytic",
            "e_ratio_mc",
            "e_ratio_rel_err",
            "var_ratio_analytic",
            "var_ratio_mc",
            "var_ratio_rel_err",
            "corr_mean",
            "corr_mean_abs",
            "corr_max_abs",
            "in_regime",
        ],
        &rows,
    )?;
    note_written(&p);

    // Companion: attention pre-activation variances at the model's width.
    let (n, d) = (cfg.model.tokens, cfg.model.embed_c / cfg.model.heads.max(1));
    let mut rows = Vec::new();
    for &f in &[0.1, 0.3] {
        let qkta = attention_variance(VarianceKind::Qkta, f, f, f, n, d)?;
        let qkta_mc = attention_variance_mc(
            VarianceKind::Qkta,
            f,
            f,
            f,
            n,
            d,
            SsaSampling::MatrixDraws,
            cfg.analysis.mc_samples,
            cfg.seed ^ 1,
        )?;
        let ssa = attention_variance(VarianceKind::Ssa, f, f, f, n, d)?;
        let ssa_mc = attention_variance_mc(
            VarianceKind::Ssa,
            f,
            f,
            f,
            n,
            d,
            SsaSampling::IndependentTerms,
            cfg.analysis.mc_samples,
            cfg.seed ^ 2,
        )?;
        let ssa_exact = ssa_variance_exact(f, f, f, n, d);
        rows.push(vec![
            fmt_num(f),
            n.to_string(),
            d.to_string(),
            fmt_num(qkta),
            fmt_num(qkta_mc),
            fmt_num(ssa),
            fmt_num(ssa_mc),
            fmt_num(ssa_exact),
        ]);
    }
    let p = out_path(cfg, "attention_variance.csv");
    write_csv(
        &p,
        prov,
        &[
            "f",
            "n",
            "d",
            "qkta_analytic",
            "qkta_mc",
            "ssa_independent",
            "ssa_independent_mc",
            "ssa_matrix_exact",
        ],
        &rows,
    )?;
    note_written(&p);
    Ok(())
}

fn cmd_analyze_epsilon(cfg: &ExperimentConfig, prov: &Provenance) -> Result<()> {
    let lif = LifConfig {
        tau: cfg.model.lif.tau,
        v_th: cfg.model.lif.v_th,
        v_reset: cfg.model.lif.v_reset,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::new();
    let mut max_base = 0.0f64;
    let mut max_fb = 0.0f64;
    for _ in 0..200 {
        let h = rng.gen_range(-2.0 * lif.v_th..3.0 * lif.v_th);
        let drive = rng.gen_range(-1.0..1.0);
        let theta = rng.gen_range(-0.5..0.5);
        let base_closed = epsilon_baseline(h, &lif);
        let base_meas = epsilon_probe(h, drive, &lif, None)?;
        let fb_closed = epsilon_feedback(h, &lif, theta);
        let fb_meas = epsilon_probe(h, drive, &lif, Some(theta))?;
        max_base = max_base.max((base_meas - base_closed).abs());
        max_fb = max_fb.max((fb_meas - fb_closed).abs());
        rows.push(vec![
            fmt_num(h),
            fmt_num(drive),
            fmt_num(lif.tau),
            fmt_num(lif.v_th),
            crate::analysis::in_surrogate_window(h, &lif).to_string(),
            fmt_num(base_closed),
            fmt_num(base_meas),
            fmt_num((base_meas - base_closed).abs()),
            fmt_num(theta),
            fmt_num(fb_closed),
            fmt_num(fb_meas),
            fmt_num((fb_meas - fb_closed).abs()),
        ]);
    }
    let p = out_path(cfg, "epsilon.csv");
    write_csv(
        &p,
        prov,
        &[
            "h",
            "drive",
            "tau",
            "v_th",
            "in_window",
            "baseline_closed",
            "baseline_measured",
            "baseline_abs_diff",
            "theta",
            "feedback_closed",
            "feedback_measured",
            "feedback_abs_diff",
        ],
        &rows,
    )?;
    note_written(&p);
    println!(
        "max_abs_diff baseline={} feedback={}",
        fmt_num(max_base),
        fmt_num(max_fb)
    );

    let mut rows = Vec::new();
    for &theta in &[0.05, 0.2, 1.0] {
        let r = gradient_flow_probe(&lif, cfg.model.t.max(2), theta)?;
        rows.push(vec![
            r.steps.to_string(),
            fmt_num(r.theta),
            fmt_num(r.baseline),
            fmt_num(r.feedback),
            fmt_num(r.feedback_expected),
        ]);
    }
    let p = out_path(cfg, "gradient_flow.csv");
    write_csv(
        &p,
        prov,
        &["steps", "theta", "baseline", "feedback", "feedback_expected"],
        &rows,
    )?;
    note_written(&p);
    Ok(())
}

/// Load a checkpoint and build a dataset whose geometry mirrors the
/// checkpointed model (the config supplies kind, sample count, and noise).
fn load_for_analysis(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    what: &str,
) -> Result<(SpikingTransformer, ParamStore, Dataset)> {
    let Some(path) = checkpoint else {
        return Err(Error::Config(format!(
            "analyze {what} requires --checkpoint (train first, then point at checkpoint.json)"
        )));
    };
    let (model, store) = load_checkpoint(path)?;
    let mut dcfg = cfg.resolved_dataset();
    dcfg.t = model.cfg.t;
    dcfg.tokens = model.cfg.tokens;
    dcfg.in_dim = model.cfg.in_dim;
    dcfg.num_classes = model.cfg.num_classes;
    dcfg.validate()?;
    let dataset = synth_dataset(&dcfg)?;
    Ok((model, store, dataset))
}

fn cmd_analyze_mi(
    cfg: &ExperimentConfig,
    prov: &Provenance,
    checkpoint: Option<&Path>,
) -> Result<()> {
    let (model, mut store, dataset) = load_for_analysis(cfg, checkpoint, "mi")?;
    let idx: Vec<usize> = (0..dataset.len()).collect();
    let (dims, vals) = dataset_features(
        &model,
        &mut store,
        &dataset,
        &idx,
        cfg.train.batch_size,
        cfg.train.precision,
    )?;
    let mi = mi_from_dense(&dims, &vals, cfg.analysis.mi_units, cfg.seed)?;
    for w in &mi.warnings {
        eprintln!("warning: {w}");
    }
    let mut rows = Vec::new();
    for t1 in 0..mi.t {
        for t2 in 0..mi.t {
            rows.push(vec![
                t1.to_string(),
                t2.to_string(),
                fmt_num(mi.get(t1, t2)),
            ]);
        }
    }
    let p = out_path(cfg, "mi.csv");
    write_csv(&p, prov, &["t1", "t2", "bits"], &rows)?;
    note_written(&p);
    let p = out_path(cfg, "mi.svg");
    svg_heatmap(
        &p,
        prov,
        "mutual information between time steps (bits)",
        mi.t,
        &mi.values,
    )?;
    note_written(&p);
    println!("mean_offdiag_bits={}", fmt_num(mi.mean_offdiag()));
    Ok(())
}

fn energy_rows(ledger: &EnergyLedger) -> Vec<Vec<String>> {
    ledger
        .rows
        .iter()
        .map(|r| {
            vec![
                r.name.clone(),
                r.macs.to_string(),
                r.accs.to_string(),
                r.rate.map(fmt_num).unwrap_or_default(),
                r.feedback.to_string(),
                fmt_num(r.accs as f64 * ledger.e_ac_pj),
            ]
        })
        .collect()
}

const ENERGY_HEADER: [&str; 6] = ["site", "macs", "accs", "rate", "feedback_path", "energy_pj"];

fn write_energy_summary(
    path: &Path,
    prov: &Provenance,
    ledger: &EnergyLedger,
) -> Result<()> {
    let rows = vec![vec![
        fmt_num(ledger.baseline_pj),
        fmt_num(ledger.feedback_pj),
        fmt_num(ledger.total_pj()),
        fmt_num(ledger.overhead_fraction()),
        fmt_num(ledger.analog_pj()),
        fmt_num(ledger.e_mac_pj),
        fmt_num(ledger.e_ac_pj),
    ]];
    write_csv(
        path,
        prov,
        &[
            "baseline_pj",
            "feedback_pj",
            "total_pj",
            "feedback_overhead_fraction",
            "analog_equivalent_pj",
            "e_mac_pj",
            "e_ac_pj",
        ],
        &rows,
    )
}

fn cmd_analyze_energy(
    cfg: &ExperimentConfig,
    prov: &Provenance,
    checkpoint: Option<&Path>,
) -> Result<()> {
    let (model, mut store, dataset) = load_for_analysis(cfg, checkpoint, "energy")?;
    let idx: Vec<usize> = (0..dataset.len().min(cfg.train.batch_size)).collect();
    let tape = instrumented_forward(&model, &mut store, &dataset, &idx, cfg.train.precision)?;
    let ledger = energy_report(&tape, cfg.analysis.e_mac_pj, cfg.analysis.e_ac_pj)?;
    let p = out_path(cfg, "energy.csv");
    write_csv(&p, prov, &ENERGY_HEADER, &energy_rows(&ledger))?;
    note_written(&p);
    let p = out_path(cfg, "energy_summary.csv");
    write_energy_summary(&p, prov, &ledger)?;
    note_written(&p);
    println!(
        "total_pj={} feedback_overhead={}",
        fmt_num(ledger.total_pj()),
        fmt_num(ledger.overhead_fraction())
    );
    Ok(())
}

// ───────────────────────── compare ─────────────────────────

struct ArmResult {
    acc: f64,
    mi_offdiag: f64,
    ledger: EnergyLedger,
}

fn run_arm(cfg: &ExperimentConfig, seed: u64, feedback: bool) -> Result<ArmResult> {
    let mut arm_cfg = cfg.clone();
    arm_cfg.seed = seed;
    let mut mcfg = arm_cfg.resolved_model();
    mcfg.feedback_enabled = feedback;
    let mut store = ParamStore::new();
    let model = SpikingTransformer::new(&mut store, mcfg.clone())?;
    let dataset = synth_dataset(&arm_cfg.resolved_dataset())?;
    let schedule = mcfg.schedule()?;
    let report = train(&model, &mut store, &dataset, &schedule, &arm_cfg.train)?;
    let acc = report.test_acc.unwrap_or(report.final_train_acc);

    let idx: Vec<usize> = (0..dataset.len()).collect();
    let (dims, vals) = dataset_features(
        &model,
        &mut store,
        &dataset,
        &idx,
        arm_cfg.train.batch_size,
        arm_cfg.train.precision,
    )?;
    let mi = mi_from_dense(&dims, &vals, arm_cfg.analysis.mi_units, seed)?;

    let bidx: Vec<usize> = (0..dataset.len().min(arm_cfg.train.batch_size)).collect();
    let tape = instrumented_forward(&model, &mut store, &dataset, &bidx, arm_cfg.train.precision)?;
    let ledger = energy_report(&tape, arm_cfg.analysis.e_mac_pj, arm_cfg.analysis.e_ac_pj)?;
    Ok(ArmResult {
        acc,
        mi_offdiag: mi.mean_offdiag(),
        ledger,
    })
}

fn cmd_compare(cfg: &ExperimentConfig, prov: &Provenance, seeds: &[u64]) -> Result<()> {
    if seeds.len() < 2 {
        return Err(Error::Config(format!(
            "compare needs at least 2 seeds, got {}",
            seeds.len()
        )));
    }
    let mut rows = Vec::new();
    let mut acc_deltas = Vec::new();
    let mut mi_deltas = Vec::new();
    let mut accs_on = Vec::new();
    let mut accs_off = Vec::new();
    let mut mis_on = Vec::new();
    let mut mis_off = Vec::new();
    let mut last: Option<(ArmResult, ArmResult)> = None;
    for &seed in seeds {
        let on = run_arm(cfg, seed, true)?;
        let off = run_arm(cfg, seed, false)?;
        println!(
            "seed={seed} acc_on={} acc_off={} mi_on={} mi_off={}",
            fmt_num(on.acc),
            fmt_num(off.acc),
            fmt_num(on.mi_offdiag),
            fmt_num(off.mi_offdiag)
        );
        rows.push(vec![
            seed.to_string(),
            fmt_num(on.acc),
            fmt_num(off.acc),
            fmt_num(on.acc - off.acc),
            fmt_num(on.mi_offdiag),
            fmt_num(off.mi_offdiag),
            fmt_num(on.mi_offdiag - off.mi_offdiag),
            fmt_num(on.ledger.total_pj()),
            fmt_num(off.ledger.total_pj()),
            fmt_num(on.ledger.overhead_fraction()),
        ]);
        acc_deltas.push(on.acc - off.acc);
        mi_deltas.push(on.mi_offdiag - off.mi_offdiag);
        accs_on.push(on.acc);
        accs_off.push(off.acc);
        mis_on.push(on.mi_offdiag);
        mis_off.push(off.mi_offdiag);
        last = Some((on, off));
    }
    let p = out_path(cfg, "compare.csv");
    write_csv(
        &p,
        prov,
        &[
            "seed",
            "acc_feedback_on",
            "acc_feedback_off",
            "acc_delta",
            "mi_offdiag_on",
            "mi_offdiag_off",
            "mi_delta",
            "energy_on_pj",
            "energy_off_pj",
            "feedback_overhead_fraction",
        ],
        &rows,
    )?;
    note_written(&p);

    let summary = |name: &str, on: &[f64], off: &[f64], deltas: &[f64]| -> Vec<String> {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let wins = deltas.iter().filter(|d| **d > 0.0).count();
        let losses = deltas.iter().filter(|d| **d < 0.0).count();
        let ties = deltas.len() - wins - losses;
        let md = mean(deltas);
        let direction = if md > 0.0 {
            "feedback-on higher"
        } else if md < 0.0 {
            "feedback-off higher"
        } else {
            "tied"
        };
        vec![
            name.to_string(),
            fmt_num(mean(on)),
            fmt_num(mean(off)),
            fmt_num(md),
            wins.to_string(),
            ties.to_string(),
            losses.to_string(),
            direction.to_string(),
        ]
    };
    let rows = vec![
        summary("accuracy", &accs_on, &accs_off, &acc_deltas),
        summary("mi_offdiag_bits", &mis_on, &mis_off, &mi_deltas),
    ];
    let p = out_path(cfg, "compare_summary.csv");
    write_csv(
        &p,
        prov,
        &[
            "metric",
            "mean_feedback_on",
            "mean_feedback_off",
            "mean_delta",
            "wins",
            "ties",
            "losses",
            "direction",
        ],
        &rows,
    )?;
    note_written(&p);
    for row in &rows {
        println!("{}: {} (mean delta {})", row[0], row[7], row[3]);
    }

    if let Some((on, off)) = last {
        let p = out_path(cfg, "compare_energy_feedback_on.csv");
        write_csv(&p, prov, &ENERGY_HEADER, &energy_rows(&on.ledger))?;
        note_written(&p);
        let p = out_path(cfg, "compare_energy_feedback_off.csv");
        write_csv(&p, prov, &ENERGY_HEADER, &energy_rows(&off.ledger))?;
        note_written(&p);
    }
    Ok(())
}

fn rel_err(measured: f64, expected: f64) -> f64 {
    if expected == 0.0 {
        measured.abs()
    } else {
        (measured - expected).abs() / expected.abs()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists_parse_and_reject_garbage() {
        assert_eq!(parse_seed_list("1, 2,3").unwrap(), vec![1, 2, 3]);
        assert_eq!(parse_seed_list("x").err().unwrap().exit_code(), 2);
    }

    #[test]
    fn cli_grammar_accepts_the_documented_forms() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
        let ok = [
            vec!["tdsnn", "train", "--config", "c.cfg"],
            vec!["tdsnn", "train", "--config", "c.cfg", "--seed", "9", "--out", "o", "--precision", "32"],
            vec!["tdsnn", "analyze", "bounds", "--config", "c.cfg"],
            vec!["tdsnn", "analyze", "mi", "--config", "c.cfg", "--checkpoint", "ck.json"],
            vec!["tdsnn", "compare", "--config", "c.cfg", "--seeds", "1,2"],
        ];
        for argv in ok {
            Cli::try_parse_from(&argv).unwrap();
        }
        assert!(Cli::try_parse_from(["tdsnn", "analyze", "vibes", "--config", "c"]).is_err());
        assert!(Cli::try_parse_from(["tdsnn", "train"]).is_err());
    }

    #[test]
    fn missing_checkpoint_for_mi_and_energy_is_a_config_error() {
        let cfg = ExperimentConfig::from_str_strict("alphas = 0.25, 0.75\n").unwrap();
        let err = load_for_analysis(&cfg, None, "mi").err().unwrap();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("checkpoint"), "{err}");
    }
}
