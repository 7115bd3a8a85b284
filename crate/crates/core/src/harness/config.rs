//! Flat `key = value` configuration files.
//!
//! One entry per line, `#` starts a comment, dotted keys nest (`env.width`,
//! `train.learning_rate`). Values are booleans, numbers, `none`, bare or
//! double-quoted strings, or comma-separated lists of those.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::envs::{EnvSpec, GridWorldSpec};
use crate::error::{Error, Result};
use crate::kernels::{KernelFamily, ShapingFunctionSpec};
use crate::trainer::TrainConfig;

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Raw entries of a flat config file, in key order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlatConfig {
    entries: BTreeMap<String, String>,
}

impl FlatConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_err(format!("line {}: expected `key = value`", lineno + 1)))?;
            let key = key.trim();
            let valid = !key.is_empty()
                && key.split('.').all(|part| !part.is_empty() && part.chars().all(|c| c.is_ascii_alphanumeric() || c == '_'));
            if !valid {
                return Err(config_err(format!("line {}: invalid key `{key}`", lineno + 1)));
            }
            if entries.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(config_err(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Entries under `prefix.`, with the prefix removed, as a nested JSON object.
    fn section(&self, prefix: &str) -> Result<Map<String, Value>> {
        let mut root = Map::new();
        let dotted = format!("{prefix}.");
        for (key, raw) in &self.entries {
            let Some(rest) = key.strip_prefix(&dotted) else { continue };
            let value = if rest == "kernel" { kernel_value(raw)? } else { parse_value(raw) };
            insert_path(&mut root, rest, value)?;
        }
        Ok(root)
    }
}

fn strip_comment(line: &str) -> &str {
    let mut in_quotes = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => in_quotes = !in_quotes,
            '#' if !in_quotes => return &line[..i],
            _ => {}
        }
    }
    line
}

fn parse_scalar(raw: &str) -> Value {
    let s = raw.trim();
    if let Some(inner) = s.strip_prefix('"').and_then(|t| t.strip_suffix('"')) {
        return Value::String(inner.to_string());
    }
    match s {
        "true" => return Value::Bool(true),
        "false" => return Value::Bool(false),
        "none" | "null" => return Value::Null,
        _ => {}
    }
    if let Ok(i) = s.parse::<i64>() {
        return Value::from(i);
    }
    if let Ok(f) = s.parse::<f64>() {
        if f.is_finite() {
            return Value::from(f);
        }
    }
    Value::String(s.to_string())
}

fn split_list(raw: &str) -> Vec<&str> {
    raw.split(',').map(str::trim).filter(|s| !s.is_empty()).collect()
}

fn parse_value(raw: &str) -> Value {
    if raw.contains(',') && !raw.trim_start().starts_with('"') {
        Value::Array(split_list(raw).into_iter().map(parse_scalar).collect())
    } else {
        parse_scalar(raw)
    }
}

fn kernel_value(raw: &str) -> Result<Value> {
    let spec: ShapingFunctionSpec = raw.trim().trim_matches('"').parse()?;
    Ok(serde_json::to_value(spec)?)
}

fn insert_path(root: &mut Map<String, Value>, path: &str, value: Value) -> Result<()> {
    let mut parts = path.split('.').peekable();
    let mut node = root;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            node.insert(part.to_string(), value);
            return Ok(());
        }
        let child = node.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
        node = child
            .as_object_mut()
            .ok_or_else(|| config_err(format!("key `{path}` nests under a scalar")))?;
    }
    Ok(())
}

/// Rejects keys that the target type silently ignored.
fn check_known(section: &str, given: &Map<String, Value>, parsed: &Value) -> Result<()> {
    let known = parsed.as_object().cloned().unwrap_or_default();
    for key in given.keys() {
        if !known.contains_key(key) {
            return Err(config_err(format!("unknown key `{section}.{key}`")));
        }
    }
    Ok(())
}

fn env_from(flat: &FlatConfig) -> Result<EnvSpec> {
    let mut section = flat.section("env")?;
    let given = section.clone();
    section.entry("kind").or_insert_with(|| Value::String("grid_world".into()));
    let spec: EnvSpec =
        serde_json::from_value(Value::Object(section)).map_err(|e| config_err(format!("env section: {e}")))?;
    check_known("env", &given, &serde_json::to_value(&spec)?)?;
    Ok(spec)
}

fn train_from(flat: &FlatConfig) -> Result<TrainConfig> {
    let section = flat.section("train")?;
    let cfg: TrainConfig = serde_json::from_value(Value::Object(section.clone()))
        .map_err(|e| config_err(format!("train section: {e}")))?;
    check_known("train", &section, &serde_json::to_value(&cfg)?)?;
    cfg.validate()?;
    Ok(cfg)
}

/// A single training run: environment plus trainer settings. A top-level
/// `seed` key overrides `train.seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub env: EnvSpec,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_flat(flat: &FlatConfig) -> Result<Self> {
        let env = env_from(flat)?;
        let mut train = train_from(flat)?;
        if let Some(seed) = flat.get("seed") {
            train.seed = seed.parse().map_err(|_| config_err(format!("seed `{seed}` is not an integer")))?;
        }
        Ok(Self { env, train })
    }
}

/// Multi-seed, multi-kernel, multi-learning-rate benchmark description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    pub kernels: Vec<ShapingFunctionSpec>,
    pub learning_rates: Vec<f64>,
    /// Learning rate the degradation is measured against; the first entry of
    /// `learning_rates` unless set.
    pub reference_lr: f64,
    pub seeds: Vec<u64>,
    /// Base trainer settings; kernel, learning rate and seed are overridden per cell.
    pub train: TrainConfig,
    pub eval_episodes: usize,
    pub eval_greedy: bool,
    pub bootstrap_resamples: usize,
    pub bootstrap_seed: u64,
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(env: EnvSpec, kernels: Vec<ShapingFunctionSpec>, learning_rates: Vec<f64>, seeds: Vec<u64>) -> Result<Self> {
        let reference_lr = *learning_rates.first().ok_or_else(|| config_err("at least one learning rate is required"))?;
        let cfg = Self {
            env,
            kernels,
            learning_rates,
            reference_lr,
            seeds,
            train: TrainConfig::default(),
            eval_episodes: 100,
            eval_greedy: true,
            bootstrap_resamples: 2000,
            bootstrap_seed: 0,
            out_dir: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernels.is_empty() {
            return Err(config_err("at least one kernel is required"));
        }
        if self.seeds.is_empty() {
            return Err(config_err("at least one seed is required"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(config_err("seeds must be distinct"));
        }
        if self.learning_rates.is_empty() || self.learning_rates.iter().any(|lr| !(lr.is_finite() && *lr >= 0.0)) {
            return Err(config_err("learning rates must be a non-empty list of finite values >= 0"));
        }
        if !self.learning_rates.contains(&self.reference_lr) {
            return Err(config_err("reference_lr must be one of learning_rates"));
        }
        if self.eval_episodes == 0 {
            return Err(config_err("eval.episodes must be >= 1"));
        }
        if self.bootstrap_resamples < 1000 {
            return Err(config_err("bootstrap.resamples must be >= 1000"));
        }
        self.train.validate()
    }

    pub fn from_flat(flat: &FlatConfig) -> Result<Self> {
        const TOP: [&str; 9] = [
            "kernels",
            "learning_rates",
            "reference_lr",
            "seeds",
            "eval.episodes",
            "eval.greedy",
            "bootstrap.resamples",
            "bootstrap.seed",
            "out_dir",
        ];
        for key in flat.keys() {
            if !(key.starts_with("env.") || key.starts_with("train.") || TOP.contains(&key)) {
                return Err(config_err(format!("unknown key `{key}`")));
            }
        }
        let list = |key: &str| flat.get(key).map(split_list).unwrap_or_default();
        let kernels = list("kernels")
            .into_iter()
            .map(|k| k.parse::<ShapingFunctionSpec>().map_err(|e| config_err(format!("kernels: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let number = |key: &str, raw: &str| -> Result<f64> {
            raw.parse().map_err(|_| config_err(format!("{key}: `{raw}` is not a number")))
        };
        let learning_rates =
            list("learning_rates").into_iter().map(|v| number("learning_rates", v)).collect::<Result<Vec<_>>>()?;
        let seeds = list("seeds")
            .into_iter()
            .map(|v| v.parse::<u64>().map_err(|_| config_err(format!("seeds: `{v}` is not an integer"))))
            .collect::<Result<Vec<_>>>()?;
        let train = train_from(flat)?;
        let learning_rates = if learning_rates.is_empty() { vec![train.learning_rate] } else { learning_rates };
        let mut cfg = Self::new(env_from(flat)?, kernels, learning_rates, seeds)?;
        cfg.train = train;
        if let Some(v) = flat.get("reference_lr") {
            cfg.reference_lr = number("reference_lr", v)?;
        }
        if let Some(v) = flat.get("eval.episodes") {
            cfg.eval_episodes = number("eval.episodes", v)? as usize;
        }
        if let Some(v) = flat.get("eval.greedy") {
            cfg.eval_greedy = matches!(parse_scalar(v), Value::Bool(true));
        }
        if let Some(v) = flat.get("bootstrap.resamples") {
            cfg.bootstrap_resamples = number("bootstrap.resamples", v)? as usize;
        }
        if let Some(v) = flat.get("bootstrap.seed") {
            cfg.bootstrap_seed = number("bootstrap.seed", v)? as u64;
        }
        if let Some(v) = flat.get("out_dir") {
            cfg.out_dir = Some(PathBuf::from(v.trim_matches('"')));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::new(
            EnvSpec::GridWorld(GridWorldSpec::default()),
            vec![ShapingFunctionSpec::new(KernelFamily::Ano, 0.2).expect("default kernel")],
            vec![2.5e-4],
            vec![0],
        )
        .expect("default experiment is valid")
    }
}
