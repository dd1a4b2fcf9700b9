//! Plain-text `key = value` run configuration, presets, and the canonical
//! resolved form written next to every run.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{AttnSchedule, LayerVariant, ModelConfig};
use crate::optim::OptimConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tokenization {
    Byte,
    /// Whitespace-separated words with a frequency-capped vocabulary.
    Word,
}

impl FromStr for Tokenization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "byte" => Ok(Tokenization::Byte),
            "word" => Ok(Tokenization::Word),
            other => Err(Error::Config(format!("unknown tokenization '{other}'"))),
        }
    }
}

impl std::fmt::Display for Tokenization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Tokenization::Byte => "byte",
            Tokenization::Word => "word",
        })
    }
}

/// Batching, evaluation and bookkeeping settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub data: String,
    pub tokenization: Tokenization,
    pub word_vocab_cap: usize,
    /// Shuffle newline-separated documents and join them with a separator id.
    pub shuffle_docs: bool,
    pub batch_size: usize,
    pub unroll: usize,
    pub eval_interval: u64,
    /// `None` means "same as `unroll`".
    pub eval_unroll: Option<usize>,
    /// `None` means "same as the evaluation unroll".
    pub eval_mem: Option<usize>,
    /// Cap on dev tokens per periodic evaluation; 0 = whole split.
    pub eval_tokens: usize,
    /// 0 = only the final checkpoint.
    pub checkpoint_interval: u64,
    pub log_interval: u64,
    pub seed: u64,
    pub sweep_lr: Vec<f64>,
    pub sweep_wd: Vec<f64>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            data: String::new(),
            tokenization: Tokenization::Byte,
            word_vocab_cap: 10_000,
            shuffle_docs: false,
            batch_size: 16,
            unroll: 128,
            eval_interval: 500,
            eval_unroll: None,
            eval_mem: None,
            eval_tokens: 0,
            checkpoint_interval: 0,
            log_interval: 10,
            seed: 1,
            sweep_lr: vec![3e-4, 1e-3],
            sweep_wd: vec![0.1, 0.01],
        }
    }
}

impl TrainSettings {
    pub fn eval_unroll(&self) -> usize {
        self.eval_unroll.unwrap_or(self.unroll)
    }

    pub fn eval_mem(&self) -> usize {
        self.eval_mem.unwrap_or_else(|| self.eval_unroll())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub train: TrainSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig {
                // 0: taken from the corpus.
                vocab_size: 0,
                ..Default::default()
            },
            optim: OptimConfig::default(),
            train: TrainSettings::default(),
        }
    }
}

pub const PRESETS: &[(&str, &str)] = &[
    ("tiny", include_str!("../presets/tiny.cfg")),
    ("enwik8-base", include_str!("../presets/enwik8-base.cfg")),
    (
        "enwik8-base-k5",
        include_str!("../presets/enwik8-base-k5.cfg"),
    ),
    ("enwik8-large", include_str!("../presets/enwik8-large.cfg")),
];

/// Every accepted key, in canonical order.
pub const KEYS: &[&str] = &[
    "vocab_size",
    "n_layers",
    "d",
    "d_attn",
    "attn_schedule",
    "layer_variant",
    "dropout",
    "layer_norm",
    "pre_norm",
    "max_mem",
    "tie_embeddings",
    "independent_qkv",
    "beta1",
    "beta2",
    "lr",
    "weight_decay",
    "warmup_steps",
    "total_steps",
    "clip_norm",
    "adam_eps",
    "data",
    "tokenization",
    "word_vocab_cap",
    "shuffle_docs",
    "batch_size",
    "unroll",
    "eval_interval",
    "eval_unroll",
    "eval_mem",
    "eval_tokens",
    "checkpoint_interval",
    "log_interval",
    "seed",
    "sweep_lr",
    "sweep_wd",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid boolean '{value}' for '{key}'"
        ))),
    }
}

fn parse_auto(key: &str, value: &str) -> Result<Option<usize>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn fmt_auto(v: Option<usize>) -> String {
    v.map_or_else(|| "auto".to_string(), |v| v.to_string())
}

fn fmt_list(v: &[f64]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let text = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| *t)
            .ok_or_else(|| {
                let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
                Error::Config(format!(
                    "unknown preset '{name}' (known: {})",
                    names.join(", ")
                ))
            })?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Sets one key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (m, o, t) = (&mut self.model, &mut self.optim, &mut self.train);
        let v = value.trim();
        match key.trim() {
            "vocab_size" => m.vocab_size = parse(key, v)?,
            "n_layers" => m.n_layers = parse(key, v)?,
            "d" => m.d = parse(key, v)?,
            "d_attn" => m.d_attn = parse(key, v)?,
            "attn_schedule" => m.schedule = AttnSchedule::from_str(v)?,
            "layer_variant" => m.variant = LayerVariant::from_str(v)?,
            "dropout" => m.dropout = parse(key, v)?,
            "layer_norm" => m.layer_norm = parse_bool(key, v)?,
            "pre_norm" => m.pre_norm = parse_bool(key, v)?,
            "max_mem" => m.max_mem = parse(key, v)?,
            "tie_embeddings" => m.tie_embeddings = parse_bool(key, v)?,
            "independent_qkv" => m.independent_qkv = parse_bool(key, v)?,
            "beta1" => o.beta1 = parse(key, v)?,
            "beta2" => o.beta2 = parse(key, v)?,
            "lr" => o.lr = parse(key, v)?,
            "weight_decay" => o.weight_decay = parse(key, v)?,
            "warmup_steps" => o.warmup_steps = parse(key, v)?,
            "total_steps" => o.total_steps = parse(key, v)?,
            "clip_norm" => o.clip_norm = parse(key, v)?,
            "adam_eps" => o.eps = parse(key, v)?,
            "data" => t.data = v.to_string(),
            "tokenization" => t.tokenization = Tokenization::from_str(v)?,
            "word_vocab_cap" => t.word_vocab_cap = parse(key, v)?,
            "shuffle_docs" => t.shuffle_docs = parse_bool(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "unroll" => t.unroll = parse(key, v)?,
            "eval_interval" => t.eval_interval = parse(key, v)?,
            "eval_unroll" => t.eval_unroll = parse_auto(key, v)?,
            "eval_mem" => t.eval_mem = parse_auto(key, v)?,
            "eval_tokens" => t.eval_tokens = parse(key, v)?,
            "checkpoint_interval" => t.checkpoint_interval = parse(key, v)?,
            "log_interval" => t.log_interval = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "sweep_lr" => t.sweep_lr = parse_list(key, v)?,
            "sweep_wd" => t.sweep_wd = parse_list(key, v)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected 'key = value', got '{raw}'",
                    n + 1
                ))
            })?;
            self.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let (m, o, t) = (&self.model, &self.optim, &self.train);
        Some(match key {
            "vocab_size" => m.vocab_size.to_string(),
            "n_layers" => m.n_layers.to_string(),
            "d" => m.d.to_string(),
            "d_attn" => m.d_attn.to_string(),
            "attn_schedule" => m.schedule.to_string(),
            "layer_variant" => m.variant.to_string(),
            "dropout" => m.dropout.to_string(),
            "layer_norm" => m.layer_norm.to_string(),
            "pre_norm" => m.pre_norm.to_string(),
            "max_mem" => m.max_mem.to_string(),
            "tie_embeddings" => m.tie_embeddings.to_string(),
            "independent_qkv" => m.independent_qkv.to_string(),
            "beta1" => o.beta1.to_string(),
            "beta2" => o.beta2.to_string(),
            "lr" => o.lr.to_string(),
            "weight_decay" => o.weight_decay.to_string(),
            "warmup_steps" => o.warmup_steps.to_string(),
            "total_steps" => o.total_steps.to_string(),
            "clip_norm" => o.clip_norm.to_string(),
            "adam_eps" => o.eps.to_string(),
            "data" => t.data.clone(),
            "tokenization" => t.tokenization.to_string(),
            "word_vocab_cap" => t.word_vocab_cap.to_string(),
            "shuffle_docs" => t.shuffle_docs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "unroll" => t.unroll.to_string(),
            "eval_interval" => t.eval_interval.to_string(),
            "eval_unroll" => fmt_auto(t.eval_unroll),
            "eval_mem" => fmt_auto(t.eval_mem),
            "eval_tokens" => t.eval_tokens.to_string(),
            "checkpoint_interval" => t.checkpoint_interval.to_string(),
            "log_interval" => t.log_interval.to_string(),
            "seed" => t.seed.to_string(),
            "sweep_lr" => fmt_list(&t.sweep_lr),
            "sweep_wd" => fmt_list(&t.sweep_wd),
            _ => return None,
        })
    }

    /// Canonical text: every key in [`KEYS`] order. Feeding it back through
    /// [`RunConfig::apply_text`] reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let v = self.get(key).expect("every canonical key is readable");
            let _ = writeln!(out, "{key} = {v}");
        }
        out
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Checks everything except `vocab_size`, which may still be unresolved.
    pub fn validate(&self) -> Result<()> {
        let mut model = self.model.clone();
        if model.vocab_size == 0 {
            model.vocab_size = 1;
        }
        model.validate()?;
        self.optim.validate()?;
        let t = &self.train;
        if t.batch_size == 0 || t.unroll == 0 || t.eval_unroll() == 0 {
            return Err(Error::Config(
                "batch_size, unroll and eval_unroll must be positive".into(),
            ));
        }
        if t.log_interval == 0 {
            return Err(Error::Config("log_interval must be positive".into()));
        }
        if t.data.contains('\n') {
            return Err(Error::Config("data path must be a single line".into()));
        }
        if t.sweep_lr
            .iter()
            .chain(&t.sweep_wd)
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(Error::Config(
                "sweep values must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}
