//! Flat JSON configuration files.
//!
//! Every subcommand reads one JSON object whose keys map one-to-one onto
//! the fields below. Missing keys take their defaults, unknown keys are
//! rejected, and the resolved object is written back to the output
//! directory so that a run can be repeated from its echo alone.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::RelativeKernel;
use crate::model::{EncoderConfig, PositionMode};
use crate::relpos::EdgeSharing;
use crate::training::{AdamConfig, Task, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("config {path} is not valid JSON: {message}")]
    Syntax { path: String, message: String },

    #[error("config must be a JSON object, got {0}")]
    NotObject(&'static str),

    #[error("key `{key}`: {message}")]
    Key { key: String, message: String },

    #[error("{0}")]
    Document(String),

    #[error("invalid value for `{key}`: expected {expected}, got {got}")]
    Invalid { key: String, expected: String, got: String },

    #[error("cannot use output directory {path}: {source}")]
    OutDir {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn invalid(key: &str, expected: &str, got: impl std::fmt::Display) -> ConfigError {
    ConfigError::Invalid {
        key: key.into(),
        expected: expected.into(),
        got: got.to_string(),
    }
}

fn count(key: &str, v: i64, min: i64) -> Result<usize, ConfigError> {
    if v < min {
        let expected = if min == 0 { "a nonnegative integer".to_string() } else { format!("an integer >= {min}") };
        return Err(invalid(key, &expected, v));
    }
    Ok(v as usize)
}

fn counts(key: &str, vs: &[i64], min: i64) -> Result<Vec<usize>, ConfigError> {
    vs.iter().map(|&v| count(key, v, min)).collect()
}

fn unit_interval(key: &str, v: f64) -> Result<f64, ConfigError> {
    if !(0.0..1.0).contains(&v) {
        return Err(invalid(key, "a number in [0, 1)", v));
    }
    Ok(v)
}

fn positive(key: &str, v: f64) -> Result<f64, ConfigError> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(invalid(key, "a positive finite number", v));
    }
    Ok(v)
}

/// A flat configuration document.
pub trait FlatConfig: Serialize + DeserializeOwned + Default + PartialEq {
    /// Checks every key's invariants; errors name the key.
    fn validate(&self) -> Result<(), ConfigError>;
}

/// Parses a flat config document from text, fills defaults and validates.
pub fn parse_config_str<T: FlatConfig>(text: &str, origin: &str) -> Result<T, ConfigError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| ConfigError::Syntax {
        path: origin.into(),
        message: e.to_string(),
    })?;
    let kind = match &value {
        serde_json::Value::Object(_) => None,
        serde_json::Value::Null => Some("null"),
        serde_json::Value::Bool(_) => Some("a boolean"),
        serde_json::Value::Number(_) => Some("a number"),
        serde_json::Value::String(_) => Some("a string"),
        serde_json::Value::Array(_) => Some("an array"),
    };
    if let Some(kind) = kind {
        return Err(ConfigError::NotObject(kind));
    }
    let cfg: T = serde_path_to_error::deserialize(value).map_err(|e| {
        let key = e.path().to_string();
        let message = e.into_inner().to_string();
        if key == "." {
            ConfigError::Document(message)
        } else {
            ConfigError::Key { key, message }
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config<T: FlatConfig>(path: &Path) -> Result<T, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.display().to_string(),
        source,
    })?;
    parse_config_str(&text, &path.display().to_string())
}

/// Writes the resolved config to `out/config.json`.
pub fn echo_config<T: FlatConfig>(cfg: &T, out: &Path) -> Result<PathBuf, ConfigError> {
    let path = out.join("config.json");
    let text = serde_json::to_string_pretty(cfg).expect("flat configs serialize");
    fs::write(&path, text + "\n").map_err(|source| ConfigError::OutDir {
        path: out.display().to_string(),
        source,
    })?;
    Ok(path)
}

/// Model, data and optimizer settings for `train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub num_layers: i64,
    pub d_x: i64,
    pub d_z: i64,
    pub h: i64,
    pub d_ff: i64,
    pub vocab_size: i64,
    pub position_mode: PositionMode,
    pub k: i64,
    pub dropout_rate: f64,
    pub causal: bool,
    pub edge_sharing: EdgeSharing,
    pub use_a_k: bool,
    pub use_a_v: bool,
    pub kernel: RelativeKernel,
    pub task: Task,
    pub train_min_len: i64,
    pub train_max_len: i64,
    pub eval_lengths: Vec<i64>,
    pub batch_size: i64,
    pub steps: i64,
    pub warmup_steps: i64,
    pub lr_scale: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub label_smoothing: f64,
    pub framed: bool,
    pub eval_batches: i64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_train_config(&TrainConfig::default())
    }
}

impl RunConfig {
    pub fn from_train_config(t: &TrainConfig) -> Self {
        let e = &t.encoder;
        Self {
            num_layers: e.num_layers as i64,
            d_x: e.d_x as i64,
            d_z: e.d_z as i64,
            h: e.h as i64,
            d_ff: e.d_ff as i64,
            vocab_size: e.vocab_size as i64,
            position_mode: e.position_mode,
            k: e.k as i64,
            dropout_rate: e.dropout_rate,
            causal: e.causal,
            edge_sharing: e.edge_sharing,
            use_a_k: e.use_a_k,
            use_a_v: e.use_a_v,
            kernel: e.kernel,
            task: t.task,
            train_min_len: t.train_min_len as i64,
            train_max_len: t.train_max_len as i64,
            eval_lengths: t.eval_lengths.iter().map(|&n| n as i64).collect(),
            batch_size: t.batch_size as i64,
            steps: t.steps as i64,
            warmup_steps: t.warmup_steps as i64,
            lr_scale: t.lr_scale,
            adam_beta1: t.adam.beta1,
            adam_beta2: t.adam.beta2,
            adam_eps: t.adam.eps,
            label_smoothing: t.label_smoothing,
            framed: t.framed,
            eval_batches: t.eval_batches as i64,
            seed: t.seed,
        }
    }

    /// Key-by-key conversion; each failure names its key.
    pub fn to_train_config(&self) -> Result<TrainConfig, ConfigError> {
        let encoder = EncoderConfig {
            num_layers: count("num_layers", self.num_layers, 1)?,
            d_x: count("d_x", self.d_x, 1)?,
            d_z: count("d_z", self.d_z, 1)?,
            h: count("h", self.h, 1)?,
            d_ff: count("d_ff", self.d_ff, 1)?,
            vocab_size: count("vocab_size", self.vocab_size, crate::training::FIRST_CONTENT as i64 + 1)?,
            position_mode: self.position_mode,
            k: count("k", self.k, 0)?,
            dropout_rate: unit_interval("dropout_rate", self.dropout_rate)?,
            causal: self.causal,
            edge_sharing: self.edge_sharing,
            use_a_k: self.use_a_k,
            use_a_v: self.use_a_v,
            kernel: self.kernel,
        };
        if self.position_mode.uses_sinusoids() && !encoder.d_x.is_multiple_of(2) {
            return Err(invalid("d_x", "an even integer when position_mode uses sinusoids", self.d_x));
        }
        let train_min_len = count("train_min_len", self.train_min_len, 1)?;
        let train_max_len = count("train_max_len", self.train_max_len, 1)?;
        if train_max_len < train_min_len {
            return Err(invalid("train_max_len", "an integer >= train_min_len", self.train_max_len));
        }
        let cfg = TrainConfig {
            encoder,
            task: self.task,
            train_min_len,
            train_max_len,
            eval_lengths: counts("eval_lengths", &self.eval_lengths, 1)?,
            batch_size: count("batch_size", self.batch_size, 1)?,
            steps: count("steps", self.steps, 0)? as u64,
            warmup_steps: count("warmup_steps", self.warmup_steps, 1)? as u64,
            lr_scale: positive("lr_scale", self.lr_scale)?,
            adam: AdamConfig {
                beta1: unit_interval("adam_beta1", self.adam_beta1)?,
                beta2: unit_interval("adam_beta2", self.adam_beta2)?,
                eps: positive("adam_eps", self.adam_eps)?,
            },
            label_smoothing: unit_interval("label_smoothing", self.label_smoothing)?,
            seed: self.seed,
            framed: self.framed,
            eval_batches: count("eval_batches", self.eval_batches, 1)?,
        };
        cfg.validate().map_err(|e| ConfigError::Document(e.to_string()))?;
        Ok(cfg)
    }
}

impl FlatConfig for RunConfig {
    fn validate(&self) -> Result<(), ConfigError> {
        self.to_train_config().map(|_| ())
    }
}

/// Settings for `eval`. Model shape comes from the checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Checkpoint to load; `null` means `checkpoint.json` in the output
    /// directory.
    pub checkpoint: Option<PathBuf>,
    pub task: Task,
    pub eval_lengths: Vec<i64>,
    pub batch_size: i64,
    pub eval_batches: i64,
    pub framed: bool,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            checkpoint: None,
            task: t.task,
            eval_lengths: t.eval_lengths.iter().map(|&n| n as i64).collect(),
            batch_size: t.batch_size as i64,
            eval_batches: t.eval_batches as i64,
            framed: t.framed,
            seed: t.seed,
        }
    }
}

impl FlatConfig for EvalConfig {
    fn validate(&self) -> Result<(), ConfigError> {
        if self.eval_lengths.is_empty() {
            return Err(invalid("eval_lengths", "a non-empty list of lengths", "[]"));
        }
        counts("eval_lengths", &self.eval_lengths, 1)?;
        count("batch_size", self.batch_size, 1)?;
        count("eval_batches", self.eval_batches, 1)?;
        Ok(())
    }
}

impl EvalConfig {
    /// Training config that reproduces the data used for evaluation.
    pub fn train_config(&self, encoder: EncoderConfig) -> TrainConfig {
        TrainConfig {
            encoder,
            task: self.task,
            eval_lengths: self.eval_lengths.iter().map(|&n| n as usize).collect(),
            batch_size: self.batch_size as usize,
            eval_batches: self.eval_batches as usize,
            framed: self.framed,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.eval_lengths.iter().map(|&n| n as usize).collect()
    }
}

/// Settings for `check`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckConfig {
    /// Randomized efficient-vs-reference cases.
    pub cases: i64,
    pub max_len: i64,
    pub max_k: i64,
    pub max_batch: i64,
    pub heads: Vec<i64>,
    pub d_x: i64,
    pub d_z: i64,
    /// Restrict the sweep to `k = 0`.
    pub k_zero_only: bool,
    /// Flip the sign of the edge terms in the efficient kernel; the sweep
    /// is then expected to fail.
    pub inject_bug: bool,
    /// Seeds for the end-to-end finite-difference suite.
    pub gradient_seeds: i64,
    pub reduction_cases: i64,
    pub equivariance_seeds: i64,
    pub value_tol: f64,
    pub grad_tol: f64,
    pub fd_eps: f64,
    pub fd_rel_tol: f64,
    pub fd_abs_tol: f64,
    pub equivariance_tol: f64,
    pub witness_min: f64,
    pub reduction_tol: f64,
    pub seed: u64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            cases: 240,
            max_len: 12,
            max_k: 4,
            max_batch: 2,
            heads: vec![1, 2, 4],
            d_x: 8,
            d_z: 4,
            k_zero_only: false,
            inject_bug: false,
            gradient_seeds: 20,
            reduction_cases: 16,
            equivariance_seeds: 3,
            value_tol: 1e-9,
            grad_tol: 1e-7,
            fd_eps: 1e-5,
            fd_rel_tol: 1e-4,
            fd_abs_tol: 1e-7,
            equivariance_tol: 1e-12,
            witness_min: 1e-6,
            reduction_tol: 1e-12,
            seed: 0,
        }
    }
}

impl FlatConfig for CheckConfig {
    fn validate(&self) -> Result<(), ConfigError> {
        count("cases", self.cases, 0)?;
        count("max_len", self.max_len, 1)?;
        count("max_k", self.max_k, 0)?;
        count("max_batch", self.max_batch, 1)?;
        if self.heads.is_empty() {
            return Err(invalid("heads", "a non-empty list of head counts", "[]"));
        }
        counts("heads", &self.heads, 1)?;
        count("d_x", self.d_x, 1)?;
        count("d_z", self.d_z, 1)?;
        count("gradient_seeds", self.gradient_seeds, 0)?;
        count("reduction_cases", self.reduction_cases, 0)?;
        count("equivariance_seeds", self.equivariance_seeds, 0)?;
        for (key, v) in [
            ("value_tol", self.value_tol),
            ("grad_tol", self.grad_tol),
            ("fd_eps", self.fd_eps),
            ("fd_rel_tol", self.fd_rel_tol),
            ("fd_abs_tol", self.fd_abs_tol),
            ("equivariance_tol", self.equivariance_tol),
            ("witness_min", self.witness_min),
            ("reduction_tol", self.reduction_tol),
        ] {
            positive(key, v)?;
        }
        Ok(())
    }
}

/// Settings for `bench`. The grid is the product of the four lists. The
/// default grid uses the training batch size and keeps `b·h ≥ n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub lengths: Vec<i64>,
    pub batch_sizes: Vec<i64>,
    pub heads: Vec<i64>,
    pub ks: Vec<i64>,
    pub d_x: i64,
    pub d_z: i64,
    pub edge_sharing: EdgeSharing,
    pub causal: bool,
    pub reps: i64,
    pub warmup: i64,
    pub include_reference: bool,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lengths: vec![16, 32, 64],
            batch_sizes: vec![32],
            heads: vec![2],
            ks: vec![4],
            d_x: 64,
            d_z: 32,
            edge_sharing: EdgeSharing::PerLayer,
            causal: false,
            reps: 15,
            warmup: 2,
            include_reference: true,
            seed: 0,
        }
    }
}

impl FlatConfig for BenchConfig {
    fn validate(&self) -> Result<(), ConfigError> {
        for (key, list) in [
            ("lengths", &self.lengths),
            ("batch_sizes", &self.batch_sizes),
            ("heads", &self.heads),
        ] {
            if list.is_empty() {
                return Err(invalid(key, "a non-empty list", "[]"));
            }
            counts(key, list, 1)?;
        }
        if self.ks.is_empty() {
            return Err(invalid("ks", "a non-empty list", "[]"));
        }
        counts("ks", &self.ks, 0)?;
        count("d_x", self.d_x, 1)?;
        count("d_z", self.d_z, 1)?;
        count("reps", self.reps, 5)?;
        count("warmup", self.warmup, 2)?;
        Ok(())
    }
}
