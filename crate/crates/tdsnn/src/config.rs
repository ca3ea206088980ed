//! Experiment configuration: a flat, commented `key = value` text format
//! plus the resolved [`ExperimentConfig`] the CLI runs from.
//!
//! The format is deliberately minimal — one key per line, `#` starts a
//! comment, values are scalars or comma-separated lists. Unknown keys are
//! rejected with a message naming the key, as are duplicates, so typos
//! fail loudly instead of silently running defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::data::DatasetConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TrainConfig};
use crate::tensor::Precision;

/// Monte Carlo and energy settings for the analysis subcommands.
#[derive(Debug, Clone)]
pub struct AnalysisSettings {
    /// Samples per Monte Carlo grid point.
    pub mc_samples: usize,
    /// Token-channel sites sampled for the mutual-information matrix.
    pub mi_units: usize,
    /// Energy per multiply-accumulate, picojoules.
    pub e_mac_pj: f64,
    /// Energy per spike-driven accumulate, picojoules.
    pub e_ac_pj: f64,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        AnalysisSettings {
            mc_samples: 100_000,
            mi_units: 64,
            e_mac_pj: crate::analysis::E_MAC_PJ,
            e_ac_pj: crate::analysis::E_AC_PJ,
        }
    }
}

/// Everything one experiment needs: model geometry, dataset, training
/// hyperparameters, analysis settings, seeds, and the output directory.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub dataset_kind: crate::data::DatasetKind,
    pub dataset_samples: usize,
    pub rate_lo: f64,
    pub rate_hi: f64,
    pub noise: f64,
    pub train: TrainConfig,
    pub analysis: AnalysisSettings,
    /// Seeds for the paired-comparison subcommand.
    pub compare_seeds: Vec<u64>,
    pub out: PathBuf,
    /// Master seed: parameter initialization uses it directly, the dataset
    /// derives its own stream from it unless `data_seed` is given.
    pub seed: u64,
    pub data_seed: Option<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::default(),
            dataset_kind: crate::data::DatasetKind::TemporalXor,
            dataset_samples: 256,
            rate_lo: 0.2,
            rate_hi: 0.8,
            noise: 0.05,
            train: TrainConfig::default(),
            analysis: AnalysisSettings::default(),
            compare_seeds: vec![1, 2, 3],
            out: PathBuf::from("out"),
            seed: 7,
            data_seed: None,
        }
    }
}

impl ExperimentConfig {
    /// Parse a config file. The `alphas` key is required; everything else
    /// has a default.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config `{}`: {e}", path.display())))?;
        Self::from_str_strict(&text)
    }

    /// Parse config text. Exposed for tests and embedding.
    pub fn from_str_strict(text: &str) -> Result<Self> {
        let mut map = parse_kv(text)?;
        let mut cfg = ExperimentConfig::default();

        cfg.seed = take_parse(&mut map, "seed")?.unwrap_or(cfg.seed);
        cfg.data_seed = take_parse(&mut map, "data_seed")?;
        if let Some(s) = take_string(&mut map, "out") {
            cfg.out = PathBuf::from(s);
        }
        if let Some(p) = take_string(&mut map, "precision") {
            cfg.train.precision = parse_precision(&p)?;
        }

        // Model geometry.
        let m = &mut cfg.model;
        m.t = take_parse(&mut map, "t")?.unwrap_or(m.t);
        m.n_sub = take_parse(&mut map, "n_sub")?.unwrap_or(m.n_sub);
        m.embed_c = take_parse(&mut map, "embed_c")?.unwrap_or(m.embed_c);
        m.depth = take_parse(&mut map, "depth")?.unwrap_or(m.depth);
        m.tokens = take_parse(&mut map, "tokens")?.unwrap_or(m.tokens);
        m.in_dim = take_parse(&mut map, "in_dim")?.unwrap_or(m.in_dim);
        m.num_classes = take_parse(&mut map, "num_classes")?.unwrap_or(m.num_classes);
        m.heads = take_parse(&mut map, "heads")?.unwrap_or(m.heads);
        m.mlp_ratio = take_parse(&mut map, "mlp_ratio")?.unwrap_or(m.mlp_ratio);
        if let Some(s) = take_string(&mut map, "attention") {
            m.attention = s.parse()?;
        }
        m.attn_scale = take_parse(&mut map, "attn_scale")?.or(m.attn_scale);
        if let Some(s) = take_string(&mut map, "cm_variant") {
            m.cm_variant = s.parse()?;
        }
        if let Some(s) = take_string(&mut map, "pm_variant") {
            m.pm_variant = s.parse()?;
        }
        m.clamp_lo = take_parse(&mut map, "clamp_lo")?.unwrap_or(m.clamp_lo);
        m.clamp_hi = take_parse(&mut map, "clamp_hi")?.unwrap_or(m.clamp_hi);
        m.lif.tau = take_parse(&mut map, "tau")?.unwrap_or(m.lif.tau);
        m.lif.v_th = take_parse(&mut map, "v_th")?.unwrap_or(m.lif.v_th);
        m.lif.v_reset = take_parse(&mut map, "v_reset")?.unwrap_or(m.lif.v_reset);
        m.feedback_enabled = take_parse(&mut map, "feedback")?.unwrap_or(m.feedback_enabled);
        m.carry_state = take_parse(&mut map, "carry_state")?.unwrap_or(m.carry_state);
        match take_string(&mut map, "alphas") {
            Some(s) => m.alphas = Some(parse_list(&s, "alphas")?),
            None => {
                return Err(Error::Config(
                    "missing required key `alphas` (per-segment loss weights, e.g. `alphas = 0.25, 0.75`)"
                        .into(),
                ))
            }
        }

        // Dataset.
        if let Some(s) = take_string(&mut map, "dataset") {
            cfg.dataset_kind = s.parse()?;
        }
        cfg.dataset_samples = take_parse(&mut map, "samples")?.unwrap_or(cfg.dataset_samples);
        cfg.rate_lo = take_parse(&mut map, "rate_lo")?.unwrap_or(cfg.rate_lo);
        cfg.rate_hi = take_parse(&mut map, "rate_hi")?.unwrap_or(cfg.rate_hi);
        cfg.noise = take_parse(&mut map, "noise")?.unwrap_or(cfg.noise);

        // Training.
        let t = &mut cfg.train;
        t.epochs = take_parse(&mut map, "epochs")?.unwrap_or(t.epochs);
        t.batch_size = take_parse(&mut map, "batch_size")?.unwrap_or(t.batch_size);
        t.train_fraction = take_parse(&mut map, "train_fraction")?.unwrap_or(t.train_fraction);
        t.shuffle = take_parse(&mut map, "shuffle")?.unwrap_or(t.shuffle);
        if let Some(s) = take_string(&mut map, "optimizer") {
            t.optim.kind = s.parse()?;
        }
        t.optim.lr = take_parse(&mut map, "lr")?.unwrap_or(t.optim.lr);
        t.optim.weight_decay = take_parse(&mut map, "weight_decay")?.unwrap_or(t.optim.weight_decay);
        t.optim.momentum = take_parse(&mut map, "momentum")?.unwrap_or(t.optim.momentum);

        // Analysis.
        let a = &mut cfg.analysis;
        a.mc_samples = take_parse(&mut map, "mc_samples")?.unwrap_or(a.mc_samples);
        a.mi_units = take_parse(&mut map, "mi_units")?.unwrap_or(a.mi_units);
        a.e_mac_pj = take_parse(&mut map, "e_mac_pj")?.unwrap_or(a.e_mac_pj);
        a.e_ac_pj = take_parse(&mut map, "e_ac_pj")?.unwrap_or(a.e_ac_pj);

        if let Some(s) = take_string(&mut map, "compare_seeds") {
            cfg.compare_seeds = parse_list(&s, "compare_seeds")?;
        }

        if let Some(key) = map.keys().next() {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Command-line overrides; applied after parsing, before any run.
    pub fn apply_overrides(
        &mut self,
        seed: Option<u64>,
        out: Option<&Path>,
        precision: Option<Precision>,
    ) {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(o) = out {
            self.out = o.to_path_buf();
        }
        if let Some(p) = precision {
            self.train.precision = p;
        }
    }

    /// The model config with the experiment seed folded in.
    pub fn resolved_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        m.seed = self.seed;
        m
    }

    /// The dataset config with geometry mirrored from the model and a seed
    /// stream decorrelated from parameter initialization.
    pub fn resolved_dataset(&self) -> DatasetConfig {
        DatasetConfig {
            kind: self.dataset_kind,
            samples: self.dataset_samples,
            t: self.model.t,
            tokens: self.model.tokens,
            in_dim: self.model.in_dim,
            num_classes: self.model.num_classes,
            seed: self
                .data_seed
                .unwrap_or(self.seed ^ 0x9E37_79B9_7F4A_7C15),
            rate_lo: self.rate_lo,
            rate_hi: self.rate_hi,
            noise: self.noise,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.resolved_model().validate()?;
        self.resolved_dataset().validate()?;
        if self.analysis.mc_samples < 2 {
            return Err(Error::Config("mc_samples must be at least 2".into()));
        }
        if self.analysis.mi_units == 0 {
            return Err(Error::Config("mi_units must be positive".into()));
        }
        if self.analysis.e_mac_pj <= 0.0 || self.analysis.e_ac_pj <= 0.0 {
            return Err(Error::Config("energy constants must be positive".into()));
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Canonical sorted `key = value` rendering of the *resolved* config.
    /// This is what gets hashed, so two files that resolve to the same
    /// experiment share a hash regardless of comments or key order.
    pub fn canonical(&self) -> String {
        let m = self.resolved_model();
        let d = self.resolved_dataset();
        let mut lines: Vec<String> = vec![
            format!("attention = {}", m.attention),
            format!(
                "attn_scale = {}",
                m.attn_scale.map(|v| v.to_string()).unwrap_or_else(|| "default".into())
            ),
            format!(
                "alphas = {}",
                m.alphas
                    .as_ref()
                    .map(|a| a
                        .iter()
                        .map(|v| v.to_string())
                        .collect::<Vec<_>>()
                        .join(","))
                    .unwrap_or_else(|| "default".into())
            ),
            format!("batch_size = {}", self.train.batch_size),
            format!("carry_state = {}", m.carry_state),
            format!("clamp_hi = {}", m.clamp_hi),
            format!("clamp_lo = {}", m.clamp_lo),
            format!("cm_variant = {}", m.cm_variant),
            format!(
                "compare_seeds = {}",
                self.compare_seeds
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            ),
            format!("data_seed = {}", d.seed),
            format!("dataset = {}", d.kind),
            format!("depth = {}", m.depth),
            format!("e_ac_pj = {}", self.analysis.e_ac_pj),
            format!("e_mac_pj = {}", self.analysis.e_mac_pj),
            format!("embed_c = {}", m.embed_c),
            format!("epochs = {}", self.train.epochs),
            format!("feedback = {}", m.feedback_enabled),
            format!("heads = {}", m.heads),
            format!("in_dim = {}", m.in_dim),
            format!("lr = {}", self.train.optim.lr),
            format!("mc_samples = {}", self.analysis.mc_samples),
            format!("mi_units = {}", self.analysis.mi_units),
            format!("mlp_ratio = {}", m.mlp_ratio),
            format!("momentum = {}", self.train.optim.momentum),
            format!("n_sub = {}", m.n_sub),
            format!("noise = {}", d.noise),
            format!("num_classes = {}", m.num_classes),
            format!("optimizer = {}", self.train.optim.kind),
            format!("pm_variant = {}", m.pm_variant),
            format!("precision = {}", precision_name(self.train.precision)),
            format!("rate_hi = {}", d.rate_hi),
            format!("rate_lo = {}", d.rate_lo),
            format!("samples = {}", d.samples),
            format!("seed = {}", self.seed),
            format!("shuffle = {}", self.train.shuffle),
            format!("t = {}", m.t),
            format!("tau = {}", m.lif.tau),
            format!("tokens = {}", m.tokens),
            format!("train_fraction = {}", self.train.train_fraction),
            format!("v_reset = {}", m.lif.v_reset),
            format!("v_th = {}", m.lif.v_th),
            format!("weight_decay = {}", self.train.optim.weight_decay),
        ];
        lines.sort();
        lines.join("\n")
    }

    /// Short hex digest of the canonical form; embedded in every artifact.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.canonical().as_bytes());
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn precision_name(p: Precision) -> &'static str {
    match p {
        Precision::F32 => "32",
        Precision::F64 => "64",
    }
}

pub fn parse_precision(s: &str) -> Result<Precision> {
    match s {
        "32" => Ok(Precision::F32),
        "64" => Ok(Precision::F64),
        other => Err(Error::Config(format!(
            "precision must be 32 or 64, got `{other}`"
        ))),
    }
}

/// Split the raw text into a key → value map, rejecting malformed lines
/// and duplicate keys.
fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some(eq) = line.find('=') else {
            return Err(Error::Config(format!(
                "line {}: expected `key = value`, got `{line}`",
                lineno + 1
            )));
        };
        let key = line[..eq].trim().to_string();
        let value = line[eq + 1..].trim().to_string();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
        }
        if map.insert(key.clone(), value).is_some() {
            return Err(Error::Config(format!(
                "duplicate config key `{key}` (line {})",
                lineno + 1
            )));
        }
    }
    Ok(map)
}

fn take_string(map: &mut BTreeMap<String, String>, key: &str) -> Option<String> {
    map.remove(key)
}

fn take_parse<T: std::str::FromStr>(
    map: &mut BTreeMap<String, String>,
    key: &str,
) -> Result<Option<T>> {
    match map.remove(key) {
        None => Ok(None),
        Some(v) => v
            .parse::<T>()
            .map(Some)
            .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{v}`"))),
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, key: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| {
            let p = p.trim();
            p.parse::<T>()
                .map_err(|_| Error::Config(format!("key `{key}`: cannot parse element `{p}`")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "alphas = 0.25, 0.75\n";

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_str_strict(MINIMAL).unwrap();
        assert_eq!(cfg.model.alphas, Some(vec![0.25, 0.75]));
        assert_eq!(cfg.model.t, 4);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.precision, Precision::F64);
    }

    #[test]
    fn missing_alphas_is_named_in_the_error() {
        let err = ExperimentConfig::from_str_strict("t = 4\n").err().unwrap();
        let msg = err.to_string();
        assert!(msg.contains("alphas"), "{msg}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn unknown_and_duplicate_keys_are_rejected() {
        let err = ExperimentConfig::from_str_strict("alphas = 1.0\nn_subb = 2\n")
            .err()
            .unwrap();
        assert!(err.to_string().contains("n_subb"), "{err}");
        let err = ExperimentConfig::from_str_strict("alphas = 1.0\nalphas = 1.0\n")
            .err()
            .unwrap();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn comments_and_spacing_do_not_change_the_hash() {
        let plain = ExperimentConfig::from_str_strict("alphas = 0.25, 0.75\nseed = 3\n").unwrap();
        let commented = ExperimentConfig::from_str_strict(
            "# an experiment\nseed   =  3   # master seed\n\nalphas=0.25,0.75\n",
        )
        .unwrap();
        assert_eq!(plain.hash(), commented.hash());
        let other = ExperimentConfig::from_str_strict("alphas = 0.25, 0.75\nseed = 4\n").unwrap();
        assert_ne!(plain.hash(), other.hash());
    }

    #[test]
    fn bad_weight_sum_is_a_config_error() {
        let err = ExperimentConfig::from_str_strict("alphas = 0.3, 0.3\n")
            .err()
            .unwrap();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn overrides_change_seed_out_and_precision() {
        let mut cfg = ExperimentConfig::from_str_strict(MINIMAL).unwrap();
        cfg.apply_overrides(Some(11), Some(Path::new("elsewhere")), Some(Precision::F32));
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.resolved_model().seed, 11);
        assert_eq!(cfg.out, PathBuf::from("elsewhere"));
        assert_eq!(cfg.train.precision, Precision::F32);
    }

    #[test]
    fn dataset_mirrors_model_geometry() {
        let cfg =
            ExperimentConfig::from_str_strict("alphas = 0.25, 0.75\ntokens = 16\nin_dim = 8\n")
                .unwrap();
        let d = cfg.resolved_dataset();
        assert_eq!(d.tokens, 16);
        assert_eq!(d.in_dim, 8);
        assert_eq!(d.t, cfg.model.t);
        assert_ne!(d.seed, cfg.seed, "data stream decorrelated from init");
    }

    #[test]
    fn malformed_lines_are_rejected_with_line_numbers() {
        let err = ExperimentConfig::from_str_strict("alphas = 1.0\nnot a kv line\n")
            .err()
            .unwrap();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
