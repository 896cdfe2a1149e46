//! Experiment settings and the `key = value` config file format.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! ignored. Later lines override earlier ones. Unknown keys are errors.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{EvalOptions, MacroAverage, TraceMatch};
use crate::student::Variant;
use crate::trainer::TrainConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {message}")]
    Value { key: String, message: String },
    #[error("cannot read config {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub per_class: usize,
    pub corpus_seed: u64,
    pub split_ratio: f64,
    pub split_seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_reason: f64,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub max_len: usize,
    pub min_count: usize,
    pub threshold: f64,
    pub macro_average: MacroAverage,
    pub trace_match: TraceMatch,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            per_class: 32,
            corpus_seed: 42,
            split_ratio: 0.8,
            split_seed: 7,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            lambda_reason: t.lambda_reason,
            embed_dim: t.embed_dim,
            hidden_dim: t.hidden_dim,
            max_len: t.max_len,
            min_count: t.min_count,
            threshold: t.threshold,
            macro_average: MacroAverage::AllClasses,
            trace_match: TraceMatch::Ordered,
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

pub const KEYS: [&str; 16] = [
    "per_class",
    "corpus_seed",
    "split_ratio",
    "split_seed",
    "epochs",
    "batch_size",
    "lr",
    "lambda_reason",
    "embed_dim",
    "hidden_dim",
    "max_len",
    "min_count",
    "threshold",
    "macro_average",
    "trace_match",
    "seeds",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.to_string(),
        message: e.to_string(),
    })
}

/// Parses a comma-separated seed list such as `1,2,3` or a range `1..5`
/// (inclusive).
pub fn parse_seeds(value: &str) -> Result<Vec<u64>, String> {
    let value = value.trim();
    if let Some((a, b)) = value.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|e| format!("{e}"))?;
        let b: u64 = b.trim().parse().map_err(|e| format!("{e}"))?;
        if a > b {
            return Err(format!("empty range {value}"));
        }
        return Ok((a..=b).collect());
    }
    let seeds = value
        .split(',')
        .map(|s| s.trim().parse::<u64>().map_err(|e| format!("`{s}`: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    if seeds.is_empty() {
        return Err("no seeds".into());
    }
    Ok(seeds)
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        match key {
            "per_class" => self.per_class = parse(key, value)?,
            "corpus_seed" => self.corpus_seed = parse(key, value)?,
            "split_ratio" => self.split_ratio = parse(key, value)?,
            "split_seed" => self.split_seed = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "lambda_reason" => self.lambda_reason = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "hidden_dim" => self.hidden_dim = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            "min_count" => self.min_count = parse(key, value)?,
            "threshold" => self.threshold = parse(key, value)?,
            "macro_average" => {
                self.macro_average = match value {
                    "all_classes" => MacroAverage::AllClasses,
                    "present_only" => MacroAverage::PresentOnly,
                    _ => return Err(value_err(key, "expected all_classes or present_only")),
                }
            }
            "trace_match" => {
                self.trace_match = match value {
                    "ordered" => TraceMatch::Ordered,
                    "set" => TraceMatch::Set,
                    _ => return Err(value_err(key, "expected ordered or set")),
                }
            }
            "seeds" => {
                self.seeds = parse_seeds(value).map_err(|m| value_err(key, &m))?;
            }
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        self.validate_key(key)
    }

    fn validate_key(&self, key: &str) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(value_err(key, m));
        match key {
            "split_ratio" if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) => bad("must be in (0, 1)"),
            "batch_size" if self.batch_size == 0 => bad("must be positive"),
            "lr" if !(self.lr > 0.0 && self.lr.is_finite()) => bad("must be positive"),
            "lambda_reason" if !(self.lambda_reason >= 0.0 && self.lambda_reason.is_finite()) => {
                bad("must be non-negative")
            }
            "embed_dim" | "hidden_dim" | "max_len" if self.embed_dim == 0 || self.hidden_dim == 0 || self.max_len == 0 => {
                bad("must be positive")
            }
            "threshold" if !(0.0..1.0).contains(&self.threshold) => bad("must be in [0, 1)"),
            _ => Ok(()),
        }
    }

    /// Applies `key = value` text on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1 });
            }
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        self.apply_text(&text)
    }

    /// Every key with its effective value, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let _ = writeln!(s, "{key} = {}", self.get(key));
        }
        s
    }

    pub fn get(&self, key: &str) -> String {
        match key {
            "per_class" => self.per_class.to_string(),
            "corpus_seed" => self.corpus_seed.to_string(),
            "split_ratio" => self.split_ratio.to_string(),
            "split_seed" => self.split_seed.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr" => self.lr.to_string(),
            "lambda_reason" => self.lambda_reason.to_string(),
            "embed_dim" => self.embed_dim.to_string(),
            "hidden_dim" => self.hidden_dim.to_string(),
            "max_len" => self.max_len.to_string(),
            "min_count" => self.min_count.to_string(),
            "threshold" => self.threshold.to_string(),
            "macro_average" => match self.macro_average {
                MacroAverage::AllClasses => "all_classes".into(),
                MacroAverage::PresentOnly => "present_only".into(),
            },
            "trace_match" => match self.trace_match {
                TraceMatch::Ordered => "ordered".into(),
                TraceMatch::Set => "set".into(),
            },
            "seeds" => self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
            _ => String::new(),
        }
    }

    pub fn train_config(&self, variant: Variant, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed,
            variant,
            lambda_reason: self.lambda_reason,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            max_len: self.max_len,
            min_count: self.min_count,
            threshold: self.threshold,
            eval: self.eval_options(),
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            macro_average: self.macro_average,
            trace_match: self.trace_match,
        }
    }
}

fn value_err(key: &str, message: &str) -> ConfigError {
    ConfigError::Value {
        key: key.to_string(),
        message: message.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = ExperimentConfig::default();
        c.apply_text("# comment\nepochs = 3\n\nlr=0.01\nseeds = 1..3\ntrace_match = set\n").unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.lr, 0.01);
        assert_eq!(c.seeds, [1, 2, 3]);
        let mut d = ExperimentConfig::default();
        d.apply_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn errors() {
        let mut c = ExperimentConfig::default();
        assert_eq!(c.apply_text("epochs 3"), Err(ConfigError::Syntax { line: 1 }));
        assert_eq!(c.apply_text("bogus = 1"), Err(ConfigError::UnknownKey("bogus".into())));
        assert!(matches!(c.apply_text("split_ratio = 1.5"), Err(ConfigError::Value { .. })));
        assert!(matches!(c.apply_text("epochs = -1"), Err(ConfigError::Value { .. })));
    }

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("1,2, 5").unwrap(), [1, 2, 5]);
        assert_eq!(parse_seeds("1..5").unwrap(), [1, 2, 3, 4, 5]);
        assert!(parse_seeds("3..1").is_err());
        assert!(parse_seeds("x").is_err());
    }
}
