//! Flat `key = value` run configuration. Unknown keys are rejected; every
//! key has a default, so an empty file is a valid config.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::pipeline::{ModelConfig, TrainConfig};

pub const MODEL_KEYS: [&str; 19] = [
    "channels",
    "height",
    "width",
    "t_in",
    "t_out",
    "c_hid",
    "strides",
    "n_blocks",
    "q",
    "layers",
    "measurements",
    "c_q",
    "topology",
    "correlation_threshold",
    "d_h",
    "c_h",
    "gate_mode",
    "refine3d",
    "ablation",
];

pub const TRAIN_KEYS: [&str; 6] = ["epochs", "batch", "lr", "seed", "clip_norm", "val_fraction"];

pub const PATH_KEYS: [&str; 3] = ["data", "checkpoint", "reports"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub reports: PathBuf,
    n_blocks: Option<usize>,
    explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: PathBuf::from("data"),
            checkpoint: PathBuf::from("checkpoint.qeno"),
            reports: PathBuf::from("reports"),
            n_blocks: None,
            explicit: BTreeSet::new(),
        }
    }
}

fn parse_val<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected a boolean, got `{value}`"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|s| parse_val::<usize>(key, s.trim())).collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if cfg.explicit.contains(k) {
                return Err(Error::Config(format!("line {}: `{k}` given twice", i + 1)));
            }
            cfg.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        cfg.finish()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Whether `key` was given explicitly.
    pub fn is_set(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "channels" => m.channels = parse_val(key, value)?,
            "height" => m.height = parse_val(key, value)?,
            "width" => m.width = parse_val(key, value)?,
            "t_in" => m.t_in = parse_val(key, value)?,
            "t_out" => m.t_out = parse_val(key, value)?,
            "c_hid" => m.c_hid = parse_val(key, value)?,
            "strides" => m.strides = parse_list(key, value)?,
            "n_blocks" => self.n_blocks = Some(parse_val(key, value)?),
            "q" => m.teqe.qubits = parse_val(key, value)?,
            "layers" => m.teqe.layers = parse_val(key, value)?,
            "measurements" => m.teqe.measurements = value.parse()?,
            "c_q" => m.teqe.c_q = parse_val(key, value)?,
            "topology" => m.topology = value.parse()?,
            "correlation_threshold" => m.correlation_threshold = parse_val(key, value)?,
            "d_h" => m.dftu.d_h = parse_val(key, value)?,
            "c_h" => m.dftu.c_h = parse_val(key, value)?,
            "gate_mode" => m.dftu.gate_mode = value.parse()?,
            "refine3d" => m.refine3d = parse_bool(key, value)?,
            "ablation" => m.ablation = value.parse()?,
            "epochs" => t.epochs = parse_val(key, value)?,
            "batch" => t.batch = parse_val(key, value)?,
            "lr" => t.lr = parse_val(key, value)?,
            "seed" => t.seed = parse_val(key, value)?,
            "clip_norm" => t.clip_norm = parse_val(key, value)?,
            "val_fraction" => t.val_fraction = parse_val(key, value)?,
            "data" => self.data = PathBuf::from(value),
            "checkpoint" => self.checkpoint = PathBuf::from(value),
            "reports" => self.reports = PathBuf::from(value),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        if let Some(n) = self.n_blocks {
            if !self.is_set("strides") {
                self.model.strides = (0..n).map(|i| if i % 2 == 1 { 2 } else { 1 }).collect();
            } else if self.model.strides.len() != n {
                return Err(Error::Config(format!(
                    "n_blocks = {n} but strides has {} entries",
                    self.model.strides.len()
                )));
            }
        }
        self.train.validate()
    }
}

/// Canonical text of the model keys, parseable by [`model_from_text`].
pub fn model_to_text(m: &ModelConfig) -> String {
    let mut s = String::new();
    let strides: Vec<String> = m.strides.iter().map(usize::to_string).collect();
    writeln!(s, "channels = {}", m.channels).unwrap();
    writeln!(s, "height = {}", m.height).unwrap();
    writeln!(s, "width = {}", m.width).unwrap();
    writeln!(s, "t_in = {}", m.t_in).unwrap();
    writeln!(s, "t_out = {}", m.t_out).unwrap();
    writeln!(s, "c_hid = {}", m.c_hid).unwrap();
    writeln!(s, "strides = {}", strides.join(",")).unwrap();
    writeln!(s, "q = {}", m.teqe.qubits).unwrap();
    writeln!(s, "layers = {}", m.teqe.layers).unwrap();
    writeln!(s, "measurements = {}", m.teqe.measurements).unwrap();
    writeln!(s, "c_q = {}", m.teqe.c_q).unwrap();
    writeln!(s, "topology = {}", m.topology).unwrap();
    writeln!(s, "correlation_threshold = {}", m.correlation_threshold).unwrap();
    writeln!(s, "d_h = {}", m.dftu.d_h).unwrap();
    writeln!(s, "c_h = {}", m.dftu.c_h).unwrap();
    writeln!(s, "gate_mode = {}", m.dftu.gate_mode).unwrap();
    writeln!(s, "refine3d = {}", m.refine3d).unwrap();
    writeln!(s, "ablation = {}", m.ablation).unwrap();
    s
}

pub fn model_from_text(text: &str) -> Result<ModelConfig> {
    let cfg = RunConfig::parse(text)?;
    if let Some(k) = cfg.explicit.iter().find(|k| !MODEL_KEYS.contains(&k.as_str())) {
        return Err(Error::Config(format!("`{k}` is not a model key")));
    }
    Ok(cfg.model)
}
