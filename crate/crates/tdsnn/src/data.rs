//! Deterministic synthetic datasets. Three kinds:
//!
//! * `static` — linearly separable analog rasters presented identically at
//!   every time step (direct coding).
//! * `temporal-xor` — the early half of the time window shows pattern `a`,
//!   the late half pattern `b`, and the label is `a XOR b`. The label is
//!   computable only by combining information across the two halves, which
//!   makes the task a probe for whether feedback carries anything useful
//!   between segments.
//! * `rate-coded` — Bernoulli spike rasters whose rate encodes the class.
//!
//! Every generator is a pure function of its config (including the seed).

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Shape, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Static,
    TemporalXor,
    RateCoded,
}

impl FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(DatasetKind::Static),
            "temporal-xor" => Ok(DatasetKind::TemporalXor),
            "rate-coded" => Ok(DatasetKind::RateCoded),
            other => Err(Error::Config(format!(
                "unknown dataset kind `{other}` (expected static|temporal-xor|rate-coded)"
            ))),
        }
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DatasetKind::Static => "static",
            DatasetKind::TemporalXor => "temporal-xor",
            DatasetKind::RateCoded => "rate-coded",
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub samples: usize,
    pub t: usize,
    pub tokens: usize,
    pub in_dim: usize,
    pub num_classes: usize,
    pub seed: u64,
    /// Firing-rate range across classes (rate-coded kind).
    pub rate_lo: f64,
    pub rate_hi: f64,
    /// Per-pixel flip probability (temporal-xor) or Gaussian noise scale
    /// (static).
    pub noise: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::TemporalXor,
            samples: 256,
            t: 4,
            tokens: 64,
            in_dim: 16,
            num_classes: 2,
            seed: 7,
            rate_lo: 0.2,
            rate_hi: 0.8,
            noise: 0.05,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.t == 0 || self.tokens == 0 || self.in_dim == 0 {
            return Err(Error::Config("dataset sizes must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.kind == DatasetKind::TemporalXor {
            if self.t < 2 {
                return Err(Error::Config("temporal-xor needs at least two time steps".into()));
            }
            if self.num_classes != 2 {
                return Err(Error::Config("temporal-xor is a two-class task".into()));
            }
        }
        if !(0.0..=1.0).contains(&self.rate_lo)
            || !(0.0..=1.0).contains(&self.rate_hi)
            || self.rate_lo > self.rate_hi
        {
            return Err(Error::Config(format!(
                "rate range [{}, {}] must sit inside [0, 1]",
                self.rate_lo, self.rate_hi
            )));
        }
        if !(0.0..0.5).contains(&self.noise) {
            return Err(Error::Config(format!("noise {} outside [0, 0.5)", self.noise)));
        }
        Ok(())
    }
}

/// In-memory dataset: per-sample rasters of shape `[T, tokens, in_dim]`
/// (flattened, time-major) with integer labels.
pub struct Dataset {
    pub cfg: DatasetConfig,
    inputs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    /// For temporal-xor: the `(a, b)` pattern indices behind each sample.
    pattern_ids: Option<Vec<(usize, usize)>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.inputs[i]
    }

    pub fn pattern_ids(&self) -> Option<&[(usize, usize)]> {
        self.pattern_ids.as_deref()
    }

    /// Build a `[T, B, tokens, in_dim]` constant input node for the given
    /// sample indices.
    pub fn batch_input(&self, tape: &mut Tape, idx: &[usize]) -> Result<NodeId> {
        let (t, n, f) = (self.cfg.t, self.cfg.tokens, self.cfg.in_dim);
        let b = idx.len();
        if b == 0 {
            return Err(Error::Config("empty batch".into()));
        }
        let mut out = vec![0.0; t * b * n * f];
        let stride_sample = n * f;
        for (bi, &si) in idx.iter().enumerate() {
            let sample = &self.inputs[si];
            for ti in 0..t {
                let src = &sample[ti * stride_sample..(ti + 1) * stride_sample];
                let dst = ((ti * b) + bi) * stride_sample;
                out[dst..dst + stride_sample].copy_from_slice(src);
            }
        }
        tape.constant(Shape::new(&[t, b, n, f])?, out)
    }

    /// Deterministic interleaved split: every fourth sample is held out when
    /// `train_fraction` is 0.75, and analogously for other fractions.
    pub fn split(&self, train_fraction: f64) -> (Vec<usize>, Vec<usize>) {
        let period = if train_fraction >= 1.0 {
            usize::MAX
        } else {
            ((1.0 / (1.0 - train_fraction)).round() as usize).max(2)
        };
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for i in 0..self.len() {
            if period != usize::MAX && i % period == period - 1 {
                test.push(i);
            } else {
                train.push(i);
            }
        }
        (train, test)
    }
}

/// Generate a dataset from its config. Same config, same bits.
pub fn synth_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let per_step = cfg.tokens * cfg.in_dim;
    let per_sample = cfg.t * per_step;
    let mut inputs = Vec::with_capacity(cfg.samples);
    let mut labels = Vec::with_capacity(cfg.samples);
    let mut pattern_ids = None;

    match cfg.kind {
        DatasetKind::Static => {
            // Unit-norm class directions; samples sit at +/- the direction
            // plus Gaussian noise, identical at every time step.
            let mut dirs: Vec<Vec<f64>> = Vec::new();
            for _ in 0..cfg.num_classes {
                let mut d: Vec<f64> = (0..per_step).map(|_| gaussian(&mut rng)).collect();
                let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                d.iter_mut().for_each(|x| *x /= norm);
                dirs.push(d);
            }
            for i in 0..cfg.samples {
                let y = i % cfg.num_classes;
                let frame: Vec<f64> = dirs[y]
                    .iter()
                    .map(|&d| d + cfg.noise * gaussian(&mut rng))
                    .collect();
                let mut x = Vec::with_capacity(per_sample);
                for _ in 0..cfg.t {
                    x.extend_from_slice(&frame);
                }
                inputs.push(x);
                labels.push(y);
            }
        }
        DatasetKind::TemporalXor => {
            // Two fixed binary patterns; the early half of the window shows
            // pattern `a`, the late half pattern `b`, label = a XOR b.
            let patterns: Vec<Vec<f64>> = (0..2)
                .map(|_| {
                    (0..per_step)
                        .map(|_| if rng.gen::<f64>() < 0.5 { 1.0 } else { 0.0 })
                        .collect()
                })
                .collect();
            let split_t = cfg.t / 2;
            let mut ids = Vec::with_capacity(cfg.samples);
            for _ in 0..cfg.samples {
                let a = rng.gen_range(0..2usize);
                let b = rng.gen_range(0..2usize);
                let mut x = Vec::with_capacity(per_sample);
                for ti in 0..cfg.t {
                    let base = if ti < split_t { &patterns[a] } else { &patterns[b] };
                    for &bit in base {
                        let flip = rng.gen::<f64>() < cfg.noise;
                        x.push(if flip { 1.0 - bit } else { bit });
                    }
                }
                inputs.push(x);
                labels.push(a ^ b);
                ids.push((a, b));
            }
            pattern_ids = Some(ids);
        }
        DatasetKind::RateCoded => {
            for i in 0..cfg.samples {
                let y = i % cfg.num_classes;
                let rate = class_rate(cfg, y);
                let x: Vec<f64> = (0..per_sample)
                    .map(|_| if rng.gen::<f64>() < rate { 1.0 } else { 0.0 })
                    .collect();
                inputs.push(x);
                labels.push(y);
            }
        }
    }

    Ok(Dataset {
        cfg: cfg.clone(),
        inputs,
        labels,
        pattern_ids,
    })
}

/// Configured firing rate of class `k`: linear interpolation across the
/// rate range.
pub fn class_rate(cfg: &DatasetConfig, k: usize) -> f64 {
    if cfg.num_classes <= 1 {
        return cfg.rate_lo;
    }
    cfg.rate_lo + (cfg.rate_hi - cfg.rate_lo) * k as f64 / (cfg.num_classes - 1) as f64
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream simple and seedable.
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
