//! Parameter updates: a decoupled-weight-decay adaptive optimizer (the
//! default) and SGD with momentum, both with an optional cosine learning-rate
//! schedule. Updates touch trainable parameters only; buffers such as
//! normalisation running statistics are left alone.

use std::collections::HashMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimKind {
    AdamW,
    Sgd,
}

impl FromStr for OptimKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adamw" => Ok(OptimKind::AdamW),
            "sgd" => Ok(OptimKind::Sgd),
            other => Err(Error::Config(format!(
                "unknown optimizer `{other}` (expected adamw|sgd)"
            ))),
        }
    }
}

impl std::fmt::Display for OptimKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimKind::AdamW => "adamw",
            OptimKind::Sgd => "sgd",
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub momentum: f64,
    /// When set, the learning rate follows a half-cosine from `lr` to 0 over
    /// this many steps.
    pub cosine_steps: Option<usize>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            kind: OptimKind::AdamW,
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.9,
            cosine_steps: None,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {} must be >= 0", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight decay {} must be >= 0",
                self.weight_decay
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2), ("momentum", self.momentum)]
        {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} {b} outside [0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps {} must be > 0", self.eps)));
        }
        Ok(())
    }
}

/// Stateful optimizer over a [`ParamStore`]. Slot buffers are keyed by
/// parameter id and created lazily; `step` consumes the store's accumulated
/// gradients and zeroes them.
pub struct Optimizer {
    cfg: OptimConfig,
    steps: usize,
    m: HashMap<ParamId, Vec<f64>>,
    v: HashMap<ParamId, Vec<f64>>,
}

impl Optimizer {
    pub fn new(cfg: OptimConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Optimizer {
            cfg,
            steps: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }

    /// Learning rate for the *next* step under the cosine schedule (or the
    /// constant base rate without one).
    pub fn current_lr(&self) -> f64 {
        match self.cfg.cosine_steps {
            Some(total) if total > 0 => {
                let t = (self.steps as f64 / total as f64).min(1.0);
                0.5 * self.cfg.lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
            _ => self.cfg.lr,
        }
    }

    /// One update over every trainable parameter, in creation order.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let lr = self.current_lr();
        self.steps += 1;
        let t = self.steps as f64;
        for id in store.trainable_ids() {
            let g = store.grad(id).to_vec();
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for `{}`",
                    store.name(id)
                )));
            }
            match self.cfg.kind {
                OptimKind::AdamW => {
                    let n = g.len();
                    let m = self.m.entry(id).or_insert_with(|| vec![0.0; n]);
                    let v = self.v.entry(id).or_insert_with(|| vec![0.0; n]);
                    let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
                    let bc1 = 1.0 - b1.powf(t);
                    let bc2 = 1.0 - b2.powf(t);
                    let wd = self.cfg.weight_decay;
                    let eps = self.cfg.eps;
                    let theta = store.values_mut(id);
                    for i in 0..n {
                        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        theta[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * theta[i]);
                    }
                }
                OptimKind::Sgd => {
                    let n = g.len();
                    let buf = self.m.entry(id).or_insert_with(|| vec![0.0; n]);
                    let mu = self.cfg.momentum;
                    let wd = self.cfg.weight_decay;
                    let theta = store.values_mut(id);
                    for i in 0..n {
                        buf[i] = mu * buf[i] + g[i];
                        theta[i] -= lr * (buf[i] + wd * theta[i]);
                    }
                }
            }
        }
        store.zero_grads();
        Ok(())
    }
}
