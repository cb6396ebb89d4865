//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::encoder::EncoderConfig;
use crate::oracle::{DEFAULT_EXHAUSTIVE_MAX_INPUTS, DEFAULT_MC_SAMPLES};

#[derive(Debug, Clone, PartialEq, Error)]
#[error("config line {line}: {message}")]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

/// What the predictive head regresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FslTarget {
    /// The function shift, reconstructed level by level at inference.
    #[default]
    Shift,
    /// The global probability itself, used directly.
    Global,
}

impl FslTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            FslTarget::Shift => "shift",
            FslTarget::Global => "global",
        }
    }
}

impl FromStr for FslTarget {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "shift" => Ok(FslTarget::Shift),
            "global" => Ok(FslTarget::Global),
            other => Err(format!("expected shift or global, got {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub temperature: f64,
    pub target: FslTarget,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    /// Leading epochs that fit shift targets with squared error before
    /// switching to L1.
    pub warmup_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lr: 1e-3, epochs: 10, batch_size: 8, seed: 0, temperature: 0.07, target: FslTarget::Shift, grad_clip: 1.0, warmup_epochs: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleConfig {
    pub exhaustive_max_inputs: usize,
    pub mc_samples: usize,
    pub pi_p: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig { exhaustive_max_inputs: DEFAULT_EXHAUSTIVE_MAX_INPUTS, mc_samples: DEFAULT_MC_SAMPLES, pi_p: 0.5 }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PathsConfig {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub loss_curve: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub model: EncoderConfig,
    pub train: TrainConfig,
    pub oracle: OracleConfig,
    pub paths: PathsConfig,
}

fn parse_value<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError { line, message: format!("{key}: {e}") })
}

impl RunConfig {
    /// Parse `key = value` lines. Blank lines and `#` comments are skipped;
    /// unknown keys, duplicate keys and malformed values are errors.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| ConfigError { line, message: format!("expected key = value, got {content:?}") })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(ConfigError { line, message: format!("duplicate key {key}") });
            }
            cfg.set(line, key, value)?;
        }
        cfg.check().map_err(|message| ConfigError { line: 0, message })?;
        Ok(cfg)
    }

    pub fn set(&mut self, line: usize, key: &str, value: &str) -> Result<(), ConfigError> {
        let path = || Some(PathBuf::from(value));
        match key {
            "model.d_model" => self.model.d_model = parse_value(line, key, value)?,
            "model.n_heads" => self.model.n_heads = parse_value(line, key, value)?,
            "model.n_layers" => self.model.n_layers_per_step = parse_value(line, key, value)?,
            "model.max_arity" => self.model.max_arity = parse_value(line, key, value)?,
            "model.share_weights" => self.model.share_weights_across_levels = parse_value(line, key, value)?,
            "train.lr" => self.train.lr = parse_value(line, key, value)?,
            "train.epochs" => self.train.epochs = parse_value(line, key, value)?,
            "train.batch_size" => self.train.batch_size = parse_value(line, key, value)?,
            "train.seed" => self.train.seed = parse_value(line, key, value)?,
            "train.temperature" => self.train.temperature = parse_value(line, key, value)?,
            "train.target" => self.train.target = parse_value(line, key, value)?,
            "train.grad_clip" => self.train.grad_clip = parse_value(line, key, value)?,
            "train.warmup_epochs" => self.train.warmup_epochs = parse_value(line, key, value)?,
            "oracle.exhaustive_max_inputs" => self.oracle.exhaustive_max_inputs = parse_value(line, key, value)?,
            "oracle.mc_samples" => self.oracle.mc_samples = parse_value(line, key, value)?,
            "oracle.pi_p" => self.oracle.pi_p = parse_value(line, key, value)?,
            "paths.dataset" => self.paths.dataset = path(),
            "paths.checkpoint" => self.paths.checkpoint = path(),
            "paths.report" => self.paths.report = path(),
            "paths.loss_curve" => self.paths.loss_curve = path(),
            _ => return Err(ConfigError { line, message: format!("unknown key {key}") }),
        }
        Ok(())
    }

    /// Range checks that do not depend on a single line.
    pub fn check(&self) -> Result<(), String> {
        self.model.validate().map_err(|e| e.to_string())?;
        let t = &self.train;
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(format!("train.lr must be positive, got {}", t.lr));
        }
        if t.batch_size == 0 {
            return Err("train.batch_size must be positive".into());
        }
        if !(t.temperature > 0.0 && t.temperature.is_finite()) {
            return Err(format!("train.temperature must be positive, got {}", t.temperature));
        }
        if !(t.grad_clip >= 0.0) {
            return Err(format!("train.grad_clip must be non-negative, got {}", t.grad_clip));
        }
        if !(0.0..=1.0).contains(&self.oracle.pi_p) {
            return Err(format!("oracle.pi_p must lie in [0, 1], got {}", self.oracle.pi_p));
        }
        if self.oracle.mc_samples == 0 {
            return Err("oracle.mc_samples must be positive".into());
        }
        Ok(())
    }

    /// Every key with its resolved value, sorted, one `key = value` per line.
    /// Parsing this text yields the same config.
    pub fn canonical(&self) -> String {
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let mut entries: Vec<(&str, Option<String>)> = vec![
            ("model.d_model", Some(self.model.d_model.to_string())),
            ("model.n_heads", Some(self.model.n_heads.to_string())),
            ("model.n_layers", Some(self.model.n_layers_per_step.to_string())),
            ("model.max_arity", Some(self.model.max_arity.to_string())),
            ("model.share_weights", Some(self.model.share_weights_across_levels.to_string())),
            ("train.lr", Some(self.train.lr.to_string())),
            ("train.epochs", Some(self.train.epochs.to_string())),
            ("train.batch_size", Some(self.train.batch_size.to_string())),
            ("train.seed", Some(self.train.seed.to_string())),
            ("train.temperature", Some(self.train.temperature.to_string())),
            ("train.target", Some(self.train.target.as_str().to_string())),
            ("train.grad_clip", Some(self.train.grad_clip.to_string())),
            ("train.warmup_epochs", Some(self.train.warmup_epochs.to_string())),
            ("oracle.exhaustive_max_inputs", Some(self.oracle.exhaustive_max_inputs.to_string())),
            ("oracle.mc_samples", Some(self.oracle.mc_samples.to_string())),
            ("oracle.pi_p", Some(self.oracle.pi_p.to_string())),
            ("paths.dataset", opt(&self.paths.dataset)),
            ("paths.checkpoint", opt(&self.paths.checkpoint)),
            ("paths.report", opt(&self.paths.report)),
            ("paths.loss_curve", opt(&self.paths.loss_curve)),
        ];
        entries.sort_by_key(|(k, _)| *k);
        let mut out = String::new();
        for (k, v) in entries {
            if let Some(v) = v {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }

    /// SHA-256 of the model, training and oracle settings. Output paths are
    /// excluded so relocating artifacts does not change the hash.
    pub fn config_hash(&self) -> String {
        let text: String = self.canonical().lines().filter(|l| !l.starts_with("paths.")).map(|l| format!("{l}\n")).collect();
        sha256_hex(text.as_bytes())
    }

    /// Hyperparameters stored in checkpoint headers.
    pub fn checkpoint_header(&self) -> std::collections::BTreeMap<String, String> {
        self.canonical()
            .lines()
            .filter(|l| l.starts_with("model.") || l.starts_with("train."))
            .filter_map(|l| l.split_once(" = ").map(|(k, v)| (k.to_string(), v.to_string())))
            .collect()
    }

    /// Rebuild the model and training sections from a checkpoint header;
    /// everything else keeps its default.
    pub fn from_header(header: &std::collections::BTreeMap<String, String>) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        for (k, v) in header.iter().filter(|(k, _)| k.starts_with("model.") || k.starts_with("train.")) {
            cfg.set(0, k, v)?;
        }
        cfg.check().map_err(|message| ConfigError { line: 0, message })?;
        Ok(cfg)
    }

    /// Rebuild the model section from a checkpoint header.
    pub fn model_from_header(header: &std::collections::BTreeMap<String, String>) -> Result<EncoderConfig, ConfigError> {
        Ok(Self::from_header(header)?.model)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
