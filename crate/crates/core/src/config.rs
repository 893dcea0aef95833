//! Experiment configuration as flat `section.key = value` text.
//!
//! ```
//! use natmtl::config::Config;
//!
//! let cfg = Config::parse("model.variant = ctc\nmtl.enabled = true\n").unwrap();
//! assert!(cfg.mtl.enabled);
//! assert!(Config::parse("model.colour = red").is_err());
//! ```

use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::glancing::GlanceSchedule;
use crate::mtl::MtlConfig;
use crate::nar::{NarConfig, Variant};
use crate::nn::BlockConfig;
use crate::optim::{AdamConfig, Schedule};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub block: BlockConfig,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub upsample_factor: usize,
    pub max_length_offset: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Vanilla,
            block: BlockConfig::default(),
            n_enc_layers: 2,
            n_dec_layers: 3,
            upsample_factor: 2,
            max_length_offset: 4,
        }
    }
}

impl ModelConfig {
    pub fn nar(&self, vocab_size: usize) -> NarConfig {
        NarConfig {
            block: self.block.clone(),
            n_enc_layers: self.n_enc_layers,
            n_dec_layers: self.n_dec_layers,
            variant: self.variant,
            upsample_factor: self.upsample_factor,
            max_length_offset: self.max_length_offset,
            vocab_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlancingConfig {
    pub enabled: bool,
    pub ratio_start: f64,
    pub ratio_end: f64,
    /// `None` anneals over the first half of training.
    pub anneal_steps: Option<usize>,
}

impl Default for GlancingConfig {
    fn default() -> Self {
        GlancingConfig {
            enabled: false,
            ratio_start: 0.5,
            ratio_end: 0.3,
            anneal_steps: None,
        }
    }
}

impl GlancingConfig {
    pub fn schedule(&self, total_steps: usize) -> GlanceSchedule {
        GlanceSchedule {
            ratio_start: self.ratio_start,
            ratio_end: self.ratio_end,
            anneal_steps: self.anneal_steps.unwrap_or(total_steps / 2),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub label_smoothing: f64,
    pub steps: usize,
    /// Token budget per batch (sentences × longest side).
    pub max_tokens: usize,
    pub eval_every: usize,
    /// Checkpoints with the best dev BLEU kept for averaging.
    pub keep_best: usize,
    pub seed: u64,
    /// Dev sentences decoded at each evaluation (0 = all).
    pub dev_limit: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            label_smoothing: 0.1,
            steps: 2000,
            max_tokens: 1024,
            eval_every: 200,
            keep_best: 5,
            seed: 1,
            dev_limit: 500,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub mtl: MtlConfig,
    pub glancing: GlancingConfig,
    pub optim: AdamConfig,
    pub train: TrainConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl Config {
    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let m = &self.model;
        let b = &m.block;
        let t = &self.mtl;
        let gl = &self.glancing;
        let o = &self.optim;
        let tr = &self.train;
        let e: Vec<(&str, String)> = vec![
            ("model.variant", m.variant.to_string()),
            ("model.d_model", b.d_model.to_string()),
            ("model.n_heads", b.n_heads.to_string()),
            ("model.d_ff", b.d_ff.to_string()),
            ("model.dropout", b.dropout.to_string()),
            ("model.pre_norm", b.pre_norm.to_string()),
            ("model.n_enc_layers", m.n_enc_layers.to_string()),
            ("model.n_dec_layers", m.n_dec_layers.to_string()),
            ("model.upsample_factor", m.upsample_factor.to_string()),
            ("model.max_length_offset", m.max_length_offset.to_string()),
            ("mtl.enabled", t.enabled.to_string()),
            ("mtl.lambda", t.lambda.to_string()),
            ("mtl.share_params", t.share_params.to_string()),
            ("mtl.layer_dropout", t.layer_dropout.to_string()),
            ("mtl.ar_head_depth", t.ar_head_depth.to_string()),
            ("mtl.stop_gradient", t.stop_gradient.to_string()),
            ("glancing.enabled", gl.enabled.to_string()),
            ("glancing.ratio_start", gl.ratio_start.to_string()),
            ("glancing.ratio_end", gl.ratio_end.to_string()),
            (
                "glancing.anneal_steps",
                gl.anneal_steps.map_or("auto".into(), |s| s.to_string()),
            ),
            ("optim.lr", o.lr.to_string()),
            ("optim.beta1", o.beta1.to_string()),
            ("optim.beta2", o.beta2.to_string()),
            ("optim.eps", o.eps.to_string()),
            ("optim.weight_decay", o.weight_decay.to_string()),
            ("optim.warmup_frac", o.warmup_frac.to_string()),
            ("optim.schedule", o.schedule.to_string()),
            ("train.label_smoothing", tr.label_smoothing.to_string()),
            ("train.steps", tr.steps.to_string()),
            ("train.max_tokens", tr.max_tokens.to_string()),
            ("train.eval_every", tr.eval_every.to_string()),
            ("train.keep_best", tr.keep_best.to_string()),
            ("train.seed", tr.seed.to_string()),
            ("train.dev_limit", tr.dev_limit.to_string()),
        ];
        e.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn keys() -> Vec<String> {
        Config::default()
            .entries()
            .into_iter()
            .map(|(k, _)| k)
            .collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "model.variant" => self.model.variant = v.parse()?,
            "model.d_model" => self.model.block.d_model = parse(key, v)?,
            "model.n_heads" => self.model.block.n_heads = parse(key, v)?,
            "model.d_ff" => self.model.block.d_ff = parse(key, v)?,
            "model.dropout" => self.model.block.dropout = parse(key, v)?,
            "model.pre_norm" => self.model.block.pre_norm = parse(key, v)?,
            "model.n_enc_layers" => self.model.n_enc_layers = parse(key, v)?,
            "model.n_dec_layers" => self.model.n_dec_layers = parse(key, v)?,
            "model.upsample_factor" => self.model.upsample_factor = parse(key, v)?,
            "model.max_length_offset" => self.model.max_length_offset = parse(key, v)?,
            "mtl.enabled" => self.mtl.enabled = parse(key, v)?,
            "mtl.lambda" => self.mtl.lambda = parse(key, v)?,
            "mtl.share_params" => self.mtl.share_params = parse(key, v)?,
            "mtl.layer_dropout" => self.mtl.layer_dropout = parse(key, v)?,
            "mtl.ar_head_depth" => self.mtl.ar_head_depth = parse(key, v)?,
            "mtl.stop_gradient" => self.mtl.stop_gradient = parse(key, v)?,
            "glancing.enabled" => self.glancing.enabled = parse(key, v)?,
            "glancing.ratio_start" => self.glancing.ratio_start = parse(key, v)?,
            "glancing.ratio_end" => self.glancing.ratio_end = parse(key, v)?,
            "glancing.anneal_steps" => {
                self.glancing.anneal_steps = if v == "auto" {
                    None
                } else {
                    Some(parse(key, v)?)
                }
            }
            "optim.lr" => self.optim.lr = parse(key, v)?,
            "optim.beta1" => self.optim.beta1 = parse(key, v)?,
            "optim.beta2" => self.optim.beta2 = parse(key, v)?,
            "optim.eps" => self.optim.eps = parse(key, v)?,
            "optim.weight_decay" => self.optim.weight_decay = parse(key, v)?,
            "optim.warmup_frac" => self.optim.warmup_frac = parse(key, v)?,
            "optim.schedule" => self.optim.schedule = v.parse::<Schedule>()?,
            "train.label_smoothing" => self.train.label_smoothing = parse(key, v)?,
            "train.steps" => self.train.steps = parse(key, v)?,
            "train.max_tokens" => self.train.max_tokens = parse(key, v)?,
            "train.eval_every" => self.train.eval_every = parse(key, v)?,
            "train.keep_best" => self.train.keep_best = parse(key, v)?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "train.dev_limit" => self.train.dev_limit = parse(key, v)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown config key `{other}`; valid keys: {}",
                    Config::keys().join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    i + 1
                ))
            })?;
            self.set(k.trim(), v)?;
        }
        self.validate()
    }

    pub fn from_entries(entries: &[(String, String)]) -> Result<Self> {
        let mut cfg = Config::default();
        for (k, v) in entries {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn render(&self) -> String {
        self.entries()
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.nar(16).validate()?;
        self.mtl.validate()?;
        self.optim.validate()?;
        GlanceSchedule {
            ratio_start: self.glancing.ratio_start,
            ratio_end: self.glancing.ratio_end,
            anneal_steps: 0,
        }
        .validate()?;
        if !(0.0..1.0).contains(&self.train.label_smoothing) {
            return Err(Error::Config(
                "train.label_smoothing must be in [0,1)".into(),
            ));
        }
        if self.train.steps == 0 || self.train.eval_every == 0 || self.train.keep_best == 0 {
            return Err(Error::Config(
                "train.steps, train.eval_every and train.keep_best must be positive".into(),
            ));
        }
        Ok(())
    }
}
