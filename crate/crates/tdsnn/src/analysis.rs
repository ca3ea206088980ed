//! Numerical verification toolkit for the framework's closed-form claims:
//! the masked-Bernoulli variance bound, attention pre-activation variances,
//! the feedback gate's moment approximations, temporal gradient
//! sensitivities, mutual information across time steps, and the synaptic
//! energy ledger.
//!
//! Every Monte Carlo routine takes an explicit seed and is deterministic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::ChainOutput;
use crate::neuron::LifConfig;
use crate::tensor::{NodeId, OpCount, Shape, Tape};

// ───────────────────────── variance bound ─────────────────────────

/// Breakpoint between the two branches of the variance bound.
pub fn bound_breakpoint(a: f64, b: f64) -> f64 {
    (a + b) / (2.0 * a)
}

/// Upper bound on `Var(X·M)` for `X ~ Bernoulli(f)` and any `M` supported
/// on `[b, a]`: piecewise in `f` with the switch at `(a+b)/(2a)`.
pub fn clamp_variance_bound(a: f64, b: f64, f: f64) -> Result<f64> {
    if !(0.0 <= b && b < a) {
        return Err(Error::Config(format!(
            "bound needs 0 <= b < a, got b={b}, a={a}"
        )));
    }
    if !(0.0..=1.0).contains(&f) {
        return Err(Error::Config(format!("firing rate {f} outside [0, 1]")));
    }
    Ok(if f <= bound_breakpoint(a, b) {
        a * a * (f * f - f + 0.5) + a * b * (1.0 - 2.0 * f) + b * b / 2.0
    } else {
        (a * a + 2.0 * a * b + b * b - 4.0 * f * a * b) / 4.0
    })
}

/// Law of the modulation map `M` used by the Monte Carlo bound check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdversarialLaw {
    /// `M ∈ {a, b}` with the mixing weight that attains the bound with
    /// equality above the breakpoint.
    TwoPoint,
    /// `M ~ Uniform[b, a]` — strictly inside the bound.
    Uniform,
    /// `M = a` — attains the bound exactly at the breakpoint.
    Deterministic,
}

impl std::str::FromStr for AdversarialLaw {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-point" => Ok(AdversarialLaw::TwoPoint),
            "uniform" => Ok(AdversarialLaw::Uniform),
            "deterministic" => Ok(AdversarialLaw::Deterministic),
            other => Err(Error::Config(format!(
                "unknown law `{other}` (expected two-point|uniform|deterministic)"
            ))),
        }
    }
}

impl std::fmt::Display for AdversarialLaw {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AdversarialLaw::TwoPoint => "two-point",
            AdversarialLaw::Uniform => "uniform",
            AdversarialLaw::Deterministic => "deterministic",
        })
    }
}

/// One Monte Carlo check of the variance bound at a grid point.
#[derive(Debug, Clone)]
pub struct BoundReport {
    pub a: f64,
    pub b: f64,
    pub f: f64,
    pub law: AdversarialLaw,
    pub samples: usize,
    /// Whether the law's construction exists at this grid point (the
    /// two-point mixing weight leaves `[0, 1]` below the breakpoint).
    pub applicable: bool,
    pub bound: f64,
    pub empirical: f64,
    /// Standard error of the empirical variance estimate.
    pub sigma_hat: f64,
    /// `bound - empirical`; a violation needs `margin < -3 sigma_hat`.
    pub margin: f64,
}

impl BoundReport {
    pub fn violates(&self) -> bool {
        self.applicable && self.margin < -3.0 * self.sigma_hat
    }
}

/// Mixing weight `P(M = a)` of the two-point law that meets the bound with
/// equality above the breakpoint.
pub fn two_point_weight(a: f64, b: f64, f: f64) -> f64 {
    (a + b - 2.0 * b * f) / (2.0 * f * (a - b))
}

/// Draw `X ~ Bernoulli(f)`, `M` from the chosen law, and compare the
/// empirical `Var(X·M)` against the analytic bound.
pub fn verify_bound_mc(
    a: f64,
    b: f64,
    f: f64,
    law: AdversarialLaw,
    samples: usize,
    seed: u64,
) -> Result<BoundReport> {
    let bound = clamp_variance_bound(a, b, f)?;
    if samples < 2 {
        return Err(Error::Config("need at least two samples".into()));
    }
    let p = two_point_weight(a, b, f);
    let applicable = match law {
        AdversarialLaw::TwoPoint => f > 0.0 && (0.0..=1.0).contains(&p),
        _ => true,
    };
    if !applicable {
        return Ok(BoundReport {
            a,
            b,
            f,
            law,
            samples,
            applicable,
            bound,
            empirical: 0.0,
            sigma_hat: 0.0,
            margin: bound,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    let mut sum4 = 0.0;
    let mut ys = Vec::with_capacity(samples);
    for _ in 0..samples {
        let x = if rng.gen::<f64>() < f { 1.0 } else { 0.0 };
        let m = match law {
            AdversarialLaw::TwoPoint => {
                if rng.gen::<f64>() < p {
                    a
                } else {
                    b
                }
            }
            AdversarialLaw::Uniform => rng.gen_range(b..=a),
            AdversarialLaw::Deterministic => a,
        };
        let y = x * m;
        ys.push(y);
        sum += y;
    }
    let mean = sum / samples as f64;
    for &y in &ys {
        let d = y - mean;
        sum2 += d * d;
        sum4 += d * d * d * d;
    }
    let n = samples as f64;
    let var = sum2 / (n - 1.0);
    let m4 = sum4 / n;
    // Standard error of the sample variance, exact to second order:
    // Var(S^2) = (mu4 - sigma^4 (n-3)/(n-1)) / n. The plug-in version is
    // degenerate for two-point data (empirical mu4 and S^2 are both
    // functions of the hit fraction alone, and the difference cancels at
    // the variance maximum), so floor it at the universal minimum: mu4 >=
    // sigma^4 for every distribution, hence Var(S^2) >= 2 sigma^4 / (n(n-1)).
    let plug_in = (m4 - var * var * (n - 3.0) / (n - 1.0)) / n;
    let floor = 2.0 * var * var / (n * (n - 1.0));
    let sigma_hat = plug_in.max(floor).sqrt();
    Ok(BoundReport {
        a,
        b,
        f,
        law,
        samples,
        applicable,
        bound,
        empirical: var,
        sigma_hat,
        margin: bound - var,
    })
}

/// The default verification grid: `a x b x f` as reported alongside the
/// bound's statement.
pub fn bound_grid() -> Vec<(f64, f64, f64)> {
    let mut grid = Vec::new();
    for &a in &[1.0, 1.5, 2.0] {
        for &b in &[0.0, 0.2] {
            let mut f = 0.05;
            while f < 0.96 {
                grid.push((a, b, f));
                f += 0.05;
            }
        }
    }
    grid
}

// ───────────────────────── attention variance ─────────────────────────

/// Attention pre-activation family for the variance formulas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceKind {
    /// Full spiking attention score `(QK^T V)` entry.
    Ssa,
    /// Query-key token gate: channel sum of one query row.
    Qkta,
}

/// Closed-form variance of one pre-activation entry. The `Ssa` form treats
/// all `N*d` products as independent (the approximation the headline
/// formula makes); see [`ssa_variance_exact`] for the matrix-draw value.
pub fn attention_variance(
    kind: VarianceKind,
    f_q: f64,
    f_k: f64,
    f_v: f64,
    n: usize,
    d: usize,
) -> Result<f64> {
    for r in [f_q, f_k, f_v] {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::Config(format!("firing rate {r} outside [0, 1]")));
        }
    }
    Ok(match kind {
        VarianceKind::Qkta => d as f64 * f_q * (1.0 - f_q),
        VarianceKind::Ssa => {
            let g = f_q * f_k * f_v;
            (n * d) as f64 * g * (1.0 - g)
        }
    })
}

/// Exact variance of an `(QK^T V)` entry under real matrix draws: the
/// independence form plus the covariances of products that share a value
/// or query factor.
pub fn ssa_variance_exact(f_q: f64, f_k: f64, f_v: f64, n: usize, d: usize) -> f64 {
    let g = f_q * f_k * f_v;
    let base = g * (1.0 - g);
    let shared_v = (d as f64 - 1.0) * f_q * f_q * f_k * f_k * f_v * (1.0 - f_v);
    let shared_q = (n as f64 - 1.0) * f_q * f_k * f_k * f_v * f_v * (1.0 - f_q);
    (n * d) as f64 * (base + shared_v + shared_q)
}

/// How the Monte Carlo companion draws the spike tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsaSampling {
    /// Each of the `N*d` triple products gets fresh independent factors —
    /// the regime in which the headline formula is exact.
    IndependentTerms,
    /// Draw whole `Q`, `K`, `V` matrices, so products share factors.
    MatrixDraws,
}

/// Empirical variance of one pre-activation entry.
pub fn attention_variance_mc(
    kind: VarianceKind,
    f_q: f64,
    f_k: f64,
    f_v: f64,
    n: usize,
    d: usize,
    sampling: SsaSampling,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if samples < 2 {
        return Err(Error::Config("need at least two samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bern = |p: f64, rng: &mut ChaCha8Rng| if rng.gen::<f64>() < p { 1.0 } else { 0.0 };
    let mut vals = Vec::with_capacity(samples);
    for _ in 0..samples {
        let y = match (kind, sampling) {
            (VarianceKind::Qkta, _) => {
                let mut s = 0.0;
                for _ in 0..d {
                    s += bern(f_q, &mut rng);
                }
                s
            }
            (VarianceKind::Ssa, SsaSampling::IndependentTerms) => {
                let mut s = 0.0;
                for _ in 0..(n * d) {
                    s += bern(f_q, &mut rng) * bern(f_k, &mut rng) * bern(f_v, &mut rng);
                }
                s
            }
            (VarianceKind::Ssa, SsaSampling::MatrixDraws) => {
                // One output entry (i=0, c=0): q row [d], K [N, d], V column [N].
                let q: Vec<f64> = (0..d).map(|_| bern(f_q, &mut rng)).collect();
                let mut s = 0.0;
                for _ in 0..n {
                    let mut dot = 0.0;
                    for qe in &q {
                        dot += qe * bern(f_k, &mut rng);
                    }
                    s += dot * bern(f_v, &mut rng);
                }
                s
            }
        };
        vals.push(y);
    }
    let mean: f64 = vals.iter().sum::<f64>() / samples as f64;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (samples as f64 - 1.0);
    Ok(var)
}

// ───────────────────────── feedback gate moments ─────────────────────────

/// Analytic and measured moment ratios of the clamped spatial gate
/// `Y = X * clamp(sum_c w'_c X_c, b, a)` with centered unit-norm weights.
#[derive(Debug, Clone)]
pub struct MomentReport {
    pub f: f64,
    pub a: f64,
    pub b: f64,
    pub channels: usize,
    pub samples: usize,
    pub e_ratio_analytic: f64,
    pub e_ratio_mc: f64,
    pub var_ratio_analytic: f64,
    pub var_ratio_mc: f64,
    /// Channel-averaged signed correlation between the gate value and the
    /// input spikes (the independence approximation says ~0).
    pub corr_mean: f64,
    pub corr_mean_abs: f64,
    pub corr_max_abs: f64,
    /// The approximations assume `b ~ 0`, `a >= 1` and small `f`; outside
    /// that regime the report still computes but flags it.
    pub regime_ok: bool,
}

/// Analytic mean ratio `E(Y)/E(X) = sqrt(f(1-f)/2pi)`.
pub fn gate_mean_ratio(f: f64) -> f64 {
    (f * (1.0 - f) / (2.0 * std::f64::consts::PI)).sqrt()
}

/// Analytic variance ratio `Var(Y)/Var(X) = f(pi-f)/(2pi)`.
pub fn gate_var_ratio(f: f64) -> f64 {
    f * (std::f64::consts::PI - f) / (2.0 * std::f64::consts::PI)
}

/// Monte Carlo measurement of the gate's moment ratios. Weights are drawn
/// fresh per sample, centered and normalized to unit square sum.
pub fn pm_moments(
    f: f64,
    a: f64,
    b: f64,
    channels: usize,
    samples: usize,
    seed: u64,
) -> Result<MomentReport> {
    if !(0.0..=1.0).contains(&f) {
        return Err(Error::Config(format!("firing rate {f} outside [0, 1]")));
    }
    if !(b < a) {
        return Err(Error::Config(format!("clamp needs b < a, got {b}, {a}")));
    }
    if channels < 2 || samples < 16 {
        return Err(Error::Config("need >= 2 channels and >= 16 samples".into()));
    }
    let regime_ok = b.abs() < 1e-9 && a >= 1.0 && f <= 0.2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum_x = 0.0;
    let mut sum_y = 0.0;
    let mut sum_y2 = 0.0;
    let mut count = 0.0;
    // Per-channel correlation accumulators between M and X_c.
    let nc = channels.min(64);
    let mut cs = vec![CorrAcc::default(); nc];
    let mut xs = vec![0.0; channels];
    let mut ws = vec![0.0; channels];
    for _ in 0..samples {
        for x in xs.iter_mut() {
            *x = if rng.gen::<f64>() < f { 1.0 } else { 0.0 };
        }
        let mut mean_w = 0.0;
        for w in ws.iter_mut() {
            *w = gaussian(&mut rng);
            mean_w += *w;
        }
        mean_w /= channels as f64;
        let mut norm = 0.0;
        for w in ws.iter_mut() {
            *w -= mean_w;
            norm += *w * *w;
        }
        let norm = norm.sqrt().max(1e-12);
        let mut m0 = 0.0;
        for (w, x) in ws.iter().zip(&xs) {
            m0 += (*w / norm) * *x;
        }
        let m = m0.clamp(b, a);
        for (c, acc) in cs.iter_mut().enumerate() {
            acc.push(m, xs[c]);
        }
        for &x in &xs {
            let y = x * m;
            sum_x += x;
            sum_y += y;
            sum_y2 += y * y;
            count += 1.0;
        }
    }
    let mean_x = sum_x / count;
    let mean_y = sum_y / count;
    let var_x = mean_x * (1.0 - mean_x);
    let var_y = sum_y2 / count - mean_y * mean_y;
    let corrs: Vec<f64> = cs.iter().map(|c| c.corr()).collect();
    let corr_mean = corrs.iter().sum::<f64>() / corrs.len() as f64;
    let corr_mean_abs = corrs.iter().map(|c| c.abs()).sum::<f64>() / corrs.len() as f64;
    let corr_max_abs = corrs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    Ok(MomentReport {
        f,
        a,
        b,
        channels,
        samples,
        e_ratio_analytic: gate_mean_ratio(f),
        e_ratio_mc: mean_y / mean_x.max(1e-300),
        var_ratio_analytic: gate_var_ratio(f),
        var_ratio_mc: var_y / var_x.max(1e-300),
        corr_mean,
        corr_mean_abs,
        corr_max_abs,
        regime_ok,
    })
}

#[derive(Default, Clone)]
struct CorrAcc {
    n: f64,
    sx: f64,
    sy: f64,
    sxx: f64,
    syy: f64,
    sxy: f64,
}

impl CorrAcc {
    fn push(&mut self, x: f64, y: f64) {
        self.n += 1.0;
        self.sx += x;
        self.sy += y;
        self.sxx += x * x;
        self.syy += y * y;
        self.sxy += x * y;
    }

    fn corr(&self) -> f64 {
        let cov = self.sxy / self.n - (self.sx / self.n) * (self.sy / self.n);
        let vx = self.sxx / self.n - (self.sx / self.n).powi(2);
        let vy = self.syy / self.n - (self.sy / self.n).powi(2);
        if vx <= 0.0 || vy <= 0.0 {
            return 0.0;
        }
        cov / (vx * vy).sqrt()
    }
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

// ───────────────────── temporal gradient sensitivity ─────────────────────

/// Whether `h` sits inside the rectangular surrogate's open window
/// `(v_th/2, 3 v_th/2)`.
pub fn in_surrogate_window(h: f64, cfg: &LifConfig) -> bool {
    h > 0.5 * cfg.v_th && h < 1.5 * cfg.v_th
}

/// Step-to-step membrane sensitivity `dH(t+1)/dH(t)` of the soft-reset
/// analysis neuron without feedback: the reset cancels the leak inside the
/// surrogate window, elsewhere only the leak survives.
pub fn epsilon_baseline(h: f64, cfg: &LifConfig) -> f64 {
    if in_surrogate_window(h, cfg) {
        0.0
    } else {
        1.0 - 1.0 / cfg.tau
    }
}

/// Same sensitivity with a feedback branch `phi(S)` added to the drive:
/// inside the window the chain rule contributes `phi'(S) / v_th`.
pub fn epsilon_feedback(h: f64, cfg: &LifConfig, dphi_ds: f64) -> f64 {
    if in_surrogate_window(h, cfg) {
        dphi_ds / cfg.v_th
    } else {
        1.0 - 1.0 / cfg.tau
    }
}

/// Autodiff measurement of the same sensitivity: build one soft-reset step
/// on a tape (optionally with a linear feedback branch `phi(S) = theta*S`)
/// and read `dH(t+1)/dH(t)` off the reverse sweep.
pub fn epsilon_probe(h0: f64, drive: f64, cfg: &LifConfig, theta: Option<f64>) -> Result<f64> {
    cfg.validate()?;
    let mut tape = Tape::new(crate::tensor::Precision::F64);
    let h = tape.leaf(Shape::new(&[1])?, vec![h0], true)?;
    let s = tape.spike(h, cfg.v_th)?;
    let neg = tape.scale(s, -cfg.v_th);
    let soft = tape.add(h, neg)?;
    let decayed = tape.scale(soft, 1.0 - 1.0 / cfg.tau);
    let mut h1 = tape.add_scalar(decayed, drive);
    if let Some(t) = theta {
        let fb = tape.scale(s, t);
        h1 = tape.add(h1, fb)?;
    }
    tape.backward(h1)?;
    Ok(tape.grad(h)[0])
}

/// Multi-step gradient-flow comparison: hold every state inside the
/// surrogate window for `t` steps and measure `dH(T)/dH(1)` with and
/// without a linear feedback branch of slope `theta`.
#[derive(Debug, Clone)]
pub struct GradientFlowReport {
    pub steps: usize,
    pub theta: f64,
    pub baseline: f64,
    pub feedback: f64,
    pub feedback_expected: f64,
}

pub fn gradient_flow_probe(cfg: &LifConfig, steps: usize, theta: f64) -> Result<GradientFlowReport> {
    cfg.validate()?;
    if steps < 2 {
        return Err(Error::Config("need at least two steps".into()));
    }
    let target = 1.2 * cfg.v_th; // inside the window, above threshold
    let run = |with_feedback: bool| -> Result<f64> {
        let mut tape = Tape::new(crate::tensor::Precision::F64);
        let h1 = tape.leaf(Shape::new(&[1])?, vec![target], true)?;
        let mut h = h1;
        for _ in 1..steps {
            let s = tape.spike(h, cfg.v_th)?;
            let neg = tape.scale(s, -cfg.v_th);
            let soft = tape.add(h, neg)?;
            let decayed = tape.scale(soft, 1.0 - 1.0 / cfg.tau);
            // Drive that lands the next membrane exactly back on target,
            // keeping the whole trajectory inside the window.
            let fb_term = if with_feedback { theta } else { 0.0 };
            let drive = target - (1.0 - 1.0 / cfg.tau) * (target - cfg.v_th) - fb_term;
            let mut next = tape.add_scalar(decayed, drive);
            if with_feedback {
                let fb = tape.scale(s, theta);
                next = tape.add(next, fb)?;
            }
            h = next;
        }
        tape.backward(h)?;
        Ok(tape.grad(h1)[0])
    };
    Ok(GradientFlowReport {
        steps,
        theta,
        baseline: run(false)?,
        feedback: run(true)?,
        feedback_expected: (theta / cfg.v_th).powi(steps as i32 - 1),
    })
}

// ───────────────────────── mutual information ─────────────────────────

/// Symmetric `T x T` matrix of per-unit plug-in mutual information (bits)
/// between time steps, averaged over sampled units.
#[derive(Debug, Clone)]
pub struct MiMatrix {
    pub t: usize,
    /// Row-major `t x t` entries in bits.
    pub values: Vec<f64>,
    pub units: usize,
    pub samples: usize,
    pub warnings: Vec<String>,
}

impl MiMatrix {
    pub fn get(&self, t1: usize, t2: usize) -> f64 {
        self.values[t1 * self.t + t2]
    }

    /// Mean of the off-diagonal entries.
    pub fn mean_offdiag(&self) -> f64 {
        if self.t < 2 {
            return 0.0;
        }
        let mut s = 0.0;
        for i in 0..self.t {
            for j in 0..self.t {
                if i != j {
                    s += self.get(i, j);
                }
            }
        }
        s / (self.t * (self.t - 1)) as f64
    }
}

/// Plug-in MI between binary features at pairs of time steps. `features`
/// is `[T, B, N, C]` binary; the batch axis is the sample dimension and
/// `units_sampled` token-channel sites are drawn without replacement.
pub fn mi_matrix(
    tape: &Tape,
    features: NodeId,
    units_sampled: usize,
    seed: u64,
) -> Result<MiMatrix> {
    mi_from_dense(
        tape.shape(features).dims(),
        tape.values(features),
        units_sampled,
        seed,
    )
}

/// Same estimator over a raw dense buffer (row-major `[T, B, N, C]`), for
/// callers that assemble features across several forward passes.
pub fn mi_from_dense(
    dims: &[usize],
    vals: &[f64],
    units_sampled: usize,
    seed: u64,
) -> Result<MiMatrix> {
    if dims.len() != 4 {
        return Err(Error::shape(
            "mi_matrix",
            format!("expected [T,B,N,C], got {dims:?}"),
        ));
    }
    let (t, b, n, c) = (dims[0], dims[1], dims[2], dims[3]);
    if vals.len() != t * b * n * c {
        return Err(Error::shape(
            "mi_matrix",
            format!("buffer holds {} values, dims say {}", vals.len(), t * b * n * c),
        ));
    }
    if b < 100 {
        return Err(Error::Config(format!(
            "mutual information needs >= 100 samples, got {b}"
        )));
    }
    if units_sampled == 0 {
        return Err(Error::Config("need at least one sampled unit".into()));
    }
    if let Some(bad) = vals.iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(Error::Config(format!(
            "mutual information expects binary features, found {bad}"
        )));
    }
    let total_units = n * c;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let units: Vec<usize> = if units_sampled >= total_units {
        (0..total_units).collect()
    } else {
        // Partial Fisher-Yates over unit indices.
        let mut pool: Vec<usize> = (0..total_units).collect();
        for i in 0..units_sampled {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
        }
        pool.truncate(units_sampled);
        pool
    };
    let at = |ti: usize, bi: usize, u: usize| -> bool {
        // u indexes the flattened (token, channel) plane.
        vals[((ti * b) + bi) * n * c + u] != 0.0
    };
    let mut warned_constant = false;
    let mut values = vec![0.0; t * t];
    for t1 in 0..t {
        for t2 in t1..t {
            let mut acc = 0.0;
            for &u in &units {
                let mut joint = [[0.0f64; 2]; 2];
                for bi in 0..b {
                    let x = at(t1, bi, u) as usize;
                    let y = at(t2, bi, u) as usize;
                    joint[x][y] += 1.0;
                }
                let inv = 1.0 / b as f64;
                let px = [
                    (joint[0][0] + joint[0][1]) * inv,
                    (joint[1][0] + joint[1][1]) * inv,
                ];
                let py = [
                    (joint[0][0] + joint[1][0]) * inv,
                    (joint[0][1] + joint[1][1]) * inv,
                ];
                if (px[0] == 0.0 || px[0] == 1.0 || py[0] == 0.0 || py[0] == 1.0)
                    && !warned_constant
                {
                    warned_constant = true;
                }
                let mut mi = 0.0;
                for x in 0..2 {
                    for y in 0..2 {
                        let p = joint[x][y] * inv;
                        if p > 0.0 && px[x] > 0.0 && py[y] > 0.0 {
                            mi += p * (p / (px[x] * py[y])).log2();
                        }
                    }
                }
                acc += mi;
            }
            let v = acc / units.len() as f64;
            values[t1 * t + t2] = v;
            values[t2 * t + t1] = v;
        }
    }
    let mut warnings = Vec::new();
    if warned_constant {
        warnings.push("constant feature encountered; its pairs contribute zero bits".into());
    }
    Ok(MiMatrix {
        t,
        values,
        units: units.len(),
        samples: b,
        warnings,
    })
}

/// Stack the per-segment hidden states of a chained forward pass back into
/// one `[T, B, N, C]` feature tensor for temporal analysis.
pub fn chain_features(tape: &mut Tape, out: &ChainOutput) -> Result<NodeId> {
    let nodes: Vec<NodeId> = out.hiddens.iter().map(|h| h.node).collect();
    if nodes.is_empty() {
        return Err(Error::Config("chain produced no hidden states".into()));
    }
    tape.concat_many(&nodes, 0)
}

/// Run the model over `idx` in chunks and assemble the final hidden states
/// into one dense `[T, B, N, C]` buffer (returned as dims + values).
///
/// Normalisation uses each chunk's own batch statistics, so this works on
/// untrained models that have no running statistics yet; the chunking is
/// part of the deterministic recipe.
pub fn dataset_features(
    model: &crate::model::SpikingTransformer,
    store: &mut crate::tensor::ParamStore,
    dataset: &crate::data::Dataset,
    idx: &[usize],
    batch_size: usize,
    precision: crate::tensor::Precision,
) -> Result<(Vec<usize>, Vec<f64>)> {
    use crate::layers::{ForwardCtx, Phase};
    use crate::tensor::TapeBinding;
    if idx.is_empty() || batch_size == 0 {
        return Err(Error::Config("need samples and a positive batch size".into()));
    }
    let schedule = model.cfg.schedule()?;
    let (t, n, c) = (model.cfg.t, model.cfg.tokens, model.cfg.embed_c);
    let b_total = idx.len();
    let plane = n * c;
    let mut buf = vec![0.0; t * b_total * plane];
    let mut offset = 0usize;
    for chunk in idx.chunks(batch_size) {
        let mut tape = Tape::new(precision);
        let mut binding = TapeBinding::new();
        let mut ctx = ForwardCtx::new(&mut tape, &mut binding, store, Phase::Train);
        let x = dataset.batch_input(ctx.tape, chunk)?;
        let out = model.forward_chain(&mut ctx, x, &schedule)?;
        let feats = chain_features(&mut tape, &out)?;
        let vals = tape.values(feats);
        let cb = chunk.len();
        for ti in 0..t {
            for bi in 0..cb {
                let src = ((ti * cb) + bi) * plane;
                let dst = ((ti * b_total) + offset + bi) * plane;
                buf[dst..dst + plane].copy_from_slice(&vals[src..src + plane]);
            }
        }
        offset += cb;
    }
    Ok((vec![t, b_total, n, c], buf))
}

/// One instrumented forward pass over a single batch, returning the tape
/// with its per-scope operation counters and firing logs for energy
/// accounting. Uses batch normalisation statistics from the batch itself,
/// so it also works on untrained parameters.
pub fn instrumented_forward(
    model: &crate::model::SpikingTransformer,
    store: &mut crate::tensor::ParamStore,
    dataset: &crate::data::Dataset,
    idx: &[usize],
    precision: crate::tensor::Precision,
) -> Result<Tape> {
    use crate::layers::{ForwardCtx, Phase};
    use crate::tensor::TapeBinding;
    if idx.is_empty() {
        return Err(Error::Config("need at least one sample".into()));
    }
    let schedule = model.cfg.schedule()?;
    let mut tape = Tape::new(precision);
    let mut binding = TapeBinding::new();
    let mut ctx = ForwardCtx::new(&mut tape, &mut binding, store, Phase::Train);
    let x = dataset.batch_input(ctx.tape, idx)?;
    model.forward_chain(&mut ctx, x, &schedule)?;
    Ok(tape)
}

// ───────────────────────── energy ledger ─────────────────────────

/// Default energy constants (45nm CMOS figures this literature leans on),
/// in picojoules.
pub const E_MAC_PJ: f64 = 4.6;
pub const E_AC_PJ: f64 = 0.9;

/// One layer's synaptic-operation accounting.
#[derive(Debug, Clone)]
pub struct EnergyRow {
    pub name: String,
    /// Dense multiply-accumulates implied by the shapes (all time steps).
    pub macs: u64,
    /// Spike-gated accumulates actually performed.
    pub accs: u64,
    /// Output firing rate at this site, when recorded.
    pub rate: Option<f64>,
    /// Whether the row belongs to the feedback apparatus (processing module
    /// or the control mixer's top-down half).
    pub feedback: bool,
}

/// Whole-network energy report. Energies are picojoules; `macs` model the
/// analog (multiply-accumulate) cost of the same architecture, `accs` the
/// spike-driven accumulate cost. One multiply-accumulate counts as two
/// floating-point operations when converting to FLOPs.
#[derive(Debug, Clone)]
pub struct EnergyLedger {
    pub rows: Vec<EnergyRow>,
    pub e_mac_pj: f64,
    pub e_ac_pj: f64,
    /// Accumulate energy of the backbone rows.
    pub baseline_pj: f64,
    /// Accumulate energy of the feedback rows.
    pub feedback_pj: f64,
}

impl EnergyLedger {
    pub fn total_pj(&self) -> f64 {
        self.baseline_pj + self.feedback_pj
    }

    /// Feedback share of the spiking energy.
    pub fn overhead_fraction(&self) -> f64 {
        let t = self.total_pj();
        if t == 0.0 {
            0.0
        } else {
            self.feedback_pj / t
        }
    }

    /// Analog-equivalent energy (every dense MAC paid).
    pub fn analog_pj(&self) -> f64 {
        self.rows.iter().map(|r| r.macs as f64 * self.e_mac_pj).sum()
    }
}

/// Build the energy ledger from an instrumented forward tape: per-scope
/// counter totals plus recorded firing rates. The control mixer's cost is
/// split between backbone and feedback by the observed top-down share of
/// its input spikes.
pub fn energy_report(tape: &Tape, e_mac_pj: f64, e_ac_pj: f64) -> Result<EnergyLedger> {
    if e_mac_pj <= 0.0 || e_ac_pj <= 0.0 {
        return Err(Error::Config("energy constants must be positive".into()));
    }
    let rates: Vec<(String, f64, f64)> = tape
        .firing_stats()
        .map(|(n, s)| (n.to_string(), s.ones, s.count as f64))
        .collect();
    let rate_of = |name: &str| -> Option<f64> {
        rates
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, ones, count)| ones / count.max(1.0))
    };
    let mut rows = Vec::new();
    let mut baseline_accs = 0.0;
    let mut feedback_accs = 0.0;
    for (name, counts) in tape.scopes() {
        if counts.macs == 0 && counts.accs == 0 {
            continue;
        }
        let rate = rate_of(name);
        if name.starts_with("block") && rate.is_none() && !name.contains(".cm.") {
            return Err(Error::Config(format!(
                "no firing rate recorded for block site `{name}`"
            )));
        }
        let is_pm = name == "pm" || name.starts_with("pm.");
        let is_mixer = name.ends_with(".cm.mix");
        if is_pm {
            feedback_accs += counts.accs as f64;
        } else if is_mixer {
            // Split the fused projection: the top-down half of its input is
            // feedback overhead, the bottom-up half replaces the plain
            // projection the backbone would have run anyway.
            let prefix = name.trim_end_matches(".mix");
            let td = rate_of(&format!("{prefix}.s_td_in")).unwrap_or(0.0);
            let bu = rate_of("embed").unwrap_or(td.max(1e-12));
            let share = if td + bu > 0.0 { td / (td + bu) } else { 0.0 };
            feedback_accs += counts.accs as f64 * share;
            baseline_accs += counts.accs as f64 * (1.0 - share);
        } else {
            baseline_accs += counts.accs as f64;
        }
        rows.push(EnergyRow {
            name: name.to_string(),
            macs: counts.macs,
            accs: counts.accs,
            rate,
            feedback: is_pm || is_mixer,
        });
    }
    if rows.is_empty() {
        return Err(Error::Config("tape recorded no synaptic operations".into()));
    }
    Ok(EnergyLedger {
        rows,
        e_mac_pj,
        e_ac_pj,
        baseline_pj: baseline_accs * e_ac_pj,
        feedback_pj: feedback_accs * e_ac_pj,
    })
}

/// `SOP = f_r x T x FLOPs_per_step`: expected synaptic operations of a
/// layer whose input fires at `f_r`.
pub fn sop(rate: f64, t: usize, flops_per_step: u64) -> f64 {
    rate * t as f64 * flops_per_step as f64
}

/// Convenience: per-op counters of a named scope.
pub fn scope_counts(tape: &Tape, name: &str) -> Option<OpCount> {
    tape.scope_counts(name)
}
