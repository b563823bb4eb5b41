//! Flat key=value run configuration with command-line overrides.
//!
//! Precedence: command line > config file > defaults. Flags mirror the keys
//! verbatim (`--lr 0.001` sets `lr`); unknown keys are errors.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use aste_core::model::ModelConfig;
use aste_core::train::TrainConfig;
use aste_core::Precision;

#[derive(Debug, Clone)]
pub struct RunConfig {
    // paths
    pub train_data: String,
    pub dev_data: String,
    pub test_data: String,
    pub embeddings: String,
    pub checkpoint_out: String,
    pub checkpoint_in: String,
    pub resume_from: String,
    pub log_out: String,
    pub report_out: String,
    pub predict_in: String,
    pub predict_out: String,
    pub sentence: String,
    // model
    pub d_w: usize,
    pub d_h: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub max_len: usize,
    // optimization
    pub lr: f64,
    pub decay_rate: f64,
    pub decay_step: usize,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_interval: usize,
    pub seed: u64,
    // numerics
    pub precision: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        RunConfig {
            train_data: String::new(),
            dev_data: String::new(),
            test_data: String::new(),
            embeddings: String::new(),
            checkpoint_out: String::new(),
            checkpoint_in: String::new(),
            resume_from: String::new(),
            log_out: String::new(),
            report_out: String::new(),
            predict_in: String::new(),
            predict_out: String::new(),
            sentence: String::new(),
            d_w: m.d_w,
            d_h: m.d_h,
            layers: m.layers,
            heads: m.heads,
            dropout: m.dropout,
            max_len: m.max_len,
            lr: t.lr,
            decay_rate: t.decay_rate,
            decay_step: t.decay_step,
            batch_size: t.batch_size,
            max_steps: t.max_steps,
            eval_interval: t.eval_interval,
            seed: t.seed,
            precision: "f32".to_string(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| anyhow!("bad value for key `{key}`: {value:?}"))
        }
        match key {
            "train_data" => self.train_data = value.to_string(),
            "dev_data" => self.dev_data = value.to_string(),
            "test_data" => self.test_data = value.to_string(),
            "embeddings" => self.embeddings = value.to_string(),
            "checkpoint_out" => self.checkpoint_out = value.to_string(),
            "checkpoint_in" => self.checkpoint_in = value.to_string(),
            "resume_from" => self.resume_from = value.to_string(),
            "log_out" => self.log_out = value.to_string(),
            "report_out" => self.report_out = value.to_string(),
            "predict_in" => self.predict_in = value.to_string(),
            "predict_out" => self.predict_out = value.to_string(),
            "sentence" => self.sentence = value.to_string(),
            "d_w" => self.d_w = num(key, value)?,
            "d_h" => self.d_h = num(key, value)?,
            "layers" => self.layers = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "max_len" => self.max_len = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "decay_rate" => self.decay_rate = num(key, value)?,
            "decay_step" => self.decay_step = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "max_steps" => self.max_steps = num(key, value)?,
            "eval_interval" => self.eval_interval = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "precision" => match value {
                "f32" | "f64" => self.precision = value.to_string(),
                _ => bail!("bad value for key `precision`: {value:?} (want f32 or f64)"),
            },
            _ => bail!("unknown config key `{key}`"),
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        let text = text.strip_prefix('\u{feff}').unwrap_or(&text);
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{}:{}: expected key=value", path.display(), idx + 1))?;
            self.set(key.trim(), value.trim())
                .with_context(|| format!("{}:{}", path.display(), idx + 1))?;
        }
        Ok(())
    }

    /// Fully-resolved configuration, echoed before any work begins.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "config.{k}={v}");
        };
        kv("train_data", self.train_data.clone());
        kv("dev_data", self.dev_data.clone());
        kv("test_data", self.test_data.clone());
        kv("embeddings", self.embeddings.clone());
        kv("checkpoint_out", self.checkpoint_out.clone());
        kv("checkpoint_in", self.checkpoint_in.clone());
        kv("resume_from", self.resume_from.clone());
        kv("log_out", self.log_out.clone());
        kv("report_out", self.report_out.clone());
        kv("predict_in", self.predict_in.clone());
        kv("predict_out", self.predict_out.clone());
        kv("sentence", self.sentence.clone());
        kv("d_w", self.d_w.to_string());
        kv("d_h", self.d_h.to_string());
        kv("layers", self.layers.to_string());
        kv("heads", self.heads.to_string());
        kv("dropout", self.dropout.to_string());
        kv("max_len", self.max_len.to_string());
        kv("lr", self.lr.to_string());
        kv("decay_rate", self.decay_rate.to_string());
        kv("decay_step", self.decay_step.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("max_steps", self.max_steps.to_string());
        kv("eval_interval", self.eval_interval.to_string());
        kv("seed", self.seed.to_string());
        kv("precision", self.precision.clone());
        out
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_w: self.d_w,
            d_h: self.d_h,
            layers: self.layers,
            heads: self.heads,
            dropout: self.dropout,
            max_len: self.max_len,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            decay_rate: self.decay_rate,
            decay_step: self.decay_step,
            batch_size: self.batch_size,
            max_steps: self.max_steps,
            eval_interval: self.eval_interval,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    pub fn precision(&self) -> Precision {
        if self.precision == "f64" {
            Precision::F64
        } else {
            Precision::F32
        }
    }

    /// Errors unless every listed key is non-empty.
    pub fn require(&self, keys: &[&str]) -> Result<()> {
        for key in keys {
            let value = match *key {
                "train_data" => &self.train_data,
                "dev_data" => &self.dev_data,
                "test_data" => &self.test_data,
                "embeddings" => &self.embeddings,
                "checkpoint_out" => &self.checkpoint_out,
                "checkpoint_in" => &self.checkpoint_in,
                "predict_in" => &self.predict_in,
                "predict_out" => &self.predict_out,
                "sentence" => &self.sentence,
                other => panic!("unknown required key {other}"),
            };
            if value.is_empty() {
                bail!("missing required config key `{key}`");
            }
        }
        Ok(())
    }

    pub fn path(&self, value: &str) -> PathBuf {
        PathBuf::from(value)
    }
}

/// Parses `[--config <path>] (--key value)*` with command-line precedence.
pub fn from_args(args: &[String]) -> Result<RunConfig> {
    let mut file: Option<PathBuf> = None;
    let mut overrides: Vec<(String, String)> = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let key = arg
            .strip_prefix("--")
            .ok_or_else(|| anyhow!("expected --key, found {arg:?}"))?;
        let value = it
            .next()
            .ok_or_else(|| anyhow!("flag --{key} is missing its value"))?;
        if key == "config" {
            file = Some(PathBuf::from(value));
        } else {
            overrides.push((key.to_string(), value.clone()));
        }
    }
    let mut cfg = RunConfig::default();
    if let Some(path) = file {
        cfg.load_file(&path)?;
    }
    for (key, value) in overrides {
        cfg.set(&key, &value)?;
    }
    Ok(cfg)
}
