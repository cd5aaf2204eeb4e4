//! Run configuration: a line-based `key = value` format with dotted keys,
//! `#` comments, strict schema validation (unknown keys are errors), and
//! command-line `--set key=value` overrides that win over the file.

use std::path::Path;

use crate::ahbs::{AggregateMode, AhbsConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        // desk-profile settings
        TrainConfig {
            lr: 3e-4,
            batch: 32,
            epochs: 2,
            warmup_ratio: 0.03,
            weight_decay: 0.03,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub samples: usize,
    pub eval_samples: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub seed: u64,
    /// Seed offset for the held-out range; eval sample seeds start here.
    pub eval_seed: u64,
}

impl Default for DataConfig {
    fn default() -> DataConfig {
        DataConfig {
            samples: 2000,
            eval_samples: 200,
            frames: 16,
            height: 32,
            width: 32,
            patch: 8,
            seed: 1,
            eval_seed: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub trials: usize,
    pub d: usize,
}

impl Default for BenchConfig {
    fn default() -> BenchConfig {
        BenchConfig {
            lengths: vec![512, 1024, 2048, 4096, 8192],
            trials: 5,
            d: 128,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    pub ahbs: AhbsConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub bench: BenchConfig,
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("key {key:?}: cannot parse value {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Config(format!("key {key:?}: expected true or false, got {other:?}"))),
    }
}

impl Config {
    /// Applies one dotted-key assignment. Unknown keys are config errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "ahbs.pathways" => self.ahbs.pathways = parse_num(key, value)?,
            "ahbs.stride" => self.ahbs.stride = parse_num(key, value)?,
            "ahbs.spatial_pool" => self.ahbs.spatial_pool = parse_num(key, value)?,
            "ahbs.aggregate" => self.ahbs.aggregate = AggregateMode::parse(value.trim())?,
            "ahbs.temporal_compress" => self.ahbs.temporal_compress = parse_num(key, value)?,
            "ahbs.d_model" => {
                self.ahbs.d_model = parse_num(key, value)?;
                self.model.d = self.ahbs.d_model;
            }
            "ahbs.project_before_scan" => self.ahbs.project_before_scan = parse_bool(key, value)?,
            "ahbs.backward_scan" => self.ahbs.backward_scan = parse_bool(key, value)?,
            "ahbs.scan_enabled" => self.ahbs.scan_enabled = parse_bool(key, value)?,
            "ahbs.state_dim" => self.ahbs.state_dim = parse_num(key, value)?,
            "model.layers" => self.model.layers = parse_num(key, value)?,
            "model.expand" => self.model.expand = parse_num(key, value)?,
            "model.conv_width" => self.model.conv_width = parse_num(key, value)?,
            "model.state_dim" => self.model.state_dim = parse_num(key, value)?,
            "train.lr" => self.train.lr = parse_num(key, value)?,
            "train.batch" => self.train.batch = parse_num(key, value)?,
            "train.epochs" => self.train.epochs = parse_num(key, value)?,
            "train.warmup_ratio" => self.train.warmup_ratio = parse_num(key, value)?,
            "train.weight_decay" => self.train.weight_decay = parse_num(key, value)?,
            "train.seed" => self.train.seed = parse_num(key, value)?,
            "data.samples" => self.data.samples = parse_num(key, value)?,
            "data.eval_samples" => self.data.eval_samples = parse_num(key, value)?,
            "data.frames" => self.data.frames = parse_num(key, value)?,
            "data.height" => self.data.height = parse_num(key, value)?,
            "data.width" => self.data.width = parse_num(key, value)?,
            "data.patch" => self.data.patch = parse_num(key, value)?,
            "data.seed" => self.data.seed = parse_num(key, value)?,
            "data.eval_seed" => self.data.eval_seed = parse_num(key, value)?,
            "bench.lengths" => {
                let lengths: Result<Vec<usize>> = value.split(',').map(|v| parse_num(key, v)).collect();
                self.bench.lengths = lengths?;
                if self.bench.lengths.is_empty() {
                    return Err(Error::Config("bench.lengths must not be empty".into()));
                }
            }
            "bench.trials" => self.bench.trials = parse_num(key, value)?,
            "bench.d" => self.bench.d = parse_num(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Cross-field checks that individual `set` calls cannot see.
    pub fn validate(&self) -> Result<()> {
        if self.ahbs.d_model != self.model.d {
            return Err(Error::Config(format!(
                "projector width {} does not match model width {}",
                self.ahbs.d_model, self.model.d
            )));
        }
        self.ahbs.validate(self.data.frames)?;
        if self.model.layers == 0 || self.model.expand == 0 || self.model.conv_width == 0 || self.model.state_dim == 0
        {
            return Err(Error::Config("model sizes must be >= 1".into()));
        }
        if !(self.train.lr.is_finite() && self.train.lr > 0.0) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.train.lr)));
        }
        if !(0.0..=1.0).contains(&self.train.warmup_ratio) {
            return Err(Error::Config("train.warmup_ratio must lie in [0, 1]".into()));
        }
        if self.train.weight_decay < 0.0 {
            return Err(Error::Config("train.weight_decay must be >= 0".into()));
        }
        if self.train.batch == 0 || self.train.epochs == 0 {
            return Err(Error::Config("train.batch and train.epochs must be >= 1".into()));
        }
        if self.data.samples == 0 || self.data.eval_samples == 0 {
            return Err(Error::Config("data.samples and data.eval_samples must be >= 1".into()));
        }
        if self.data.height % self.data.patch != 0 || self.data.width % self.data.patch != 0 {
            return Err(Error::Config(format!(
                "frame {}x{} not divisible by patch size {}",
                self.data.height, self.data.width, self.data.patch
            )));
        }
        if self.data.eval_seed < self.data.seed.saturating_add(self.data.samples as u64) {
            return Err(Error::Config(
                "data.eval_seed overlaps the training seed range".into(),
            ));
        }
        if self.bench.trials == 0 || self.bench.d == 0 {
            return Err(Error::Config("bench.trials and bench.d must be >= 1".into()));
        }
        Ok(())
    }

    fn parse_lines(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected key = value", i + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    /// Loads defaults, then the optional file, then `--set` overrides (which
    /// win), and validates the result.
    pub fn resolve(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Config> {
        let mut cfg = Config::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(&p.display().to_string(), e))?;
            cfg.parse_lines(&text, &p.display().to_string())?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Resolved configuration in the same format the parser reads.
    pub fn echo(&self) -> String {
        let lengths: Vec<String> = self.bench.lengths.iter().map(|l| l.to_string()).collect();
        format!(
            "ahbs.pathways = {}\nahbs.stride = {}\nahbs.spatial_pool = {}\nahbs.aggregate = {}\n\
             ahbs.temporal_compress = {}\nahbs.d_model = {}\nahbs.project_before_scan = {}\n\
             ahbs.backward_scan = {}\nahbs.scan_enabled = {}\nahbs.state_dim = {}\n\
             model.layers = {}\nmodel.expand = {}\nmodel.conv_width = {}\nmodel.state_dim = {}\n\
             train.lr = {}\ntrain.batch = {}\ntrain.epochs = {}\ntrain.warmup_ratio = {}\n\
             train.weight_decay = {}\ntrain.seed = {}\n\
             data.samples = {}\ndata.eval_samples = {}\ndata.frames = {}\ndata.height = {}\n\
             data.width = {}\ndata.patch = {}\ndata.seed = {}\ndata.eval_seed = {}\n\
             bench.lengths = {}\nbench.trials = {}\nbench.d = {}\n",
            self.ahbs.pathways,
            self.ahbs.stride,
            self.ahbs.spatial_pool,
            self.ahbs.aggregate.name(),
            self.ahbs.temporal_compress,
            self.ahbs.d_model,
            self.ahbs.project_before_scan,
            self.ahbs.backward_scan,
            self.ahbs.scan_enabled,
            self.ahbs.state_dim,
            self.model.layers,
            self.model.expand,
            self.model.conv_width,
            self.model.state_dim,
            self.train.lr,
            self.train.batch,
            self.train.epochs,
            self.train.warmup_ratio,
            self.train.weight_decay,
            self.train.seed,
            self.data.samples,
            self.data.eval_samples,
            self.data.frames,
            self.data.height,
            self.data.width,
            self.data.patch,
            self.data.seed,
            self.data.eval_seed,
            lengths.join(","),
            self.bench.trials,
            self.bench.d,
        )
    }
}
