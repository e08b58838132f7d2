//! Plain-text `key = value` run configuration.
//!
//! One flat namespace mirrors the library configs (`model.*`,
//! `predictor.*`, `train.*`, `skim.*`, `synth.*`). Unknown keys are
//! rejected; command-line `--set key=value` pairs override file values;
//! every run logs the fully resolved configuration, and that dump parses
//! back to an identical configuration.

use blockskim_core::blockskim::PredictorConfig;
use blockskim_core::data::SynthConfig;
use blockskim_core::error::{Error, Result};
use blockskim_core::inference::{SkimPolicy, SkimRule};
use blockskim_core::model::ModelConfig;
use blockskim_core::training::{TrainConfig, TrainMode};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub predictor: PredictorConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    /// Threshold for the skim rule (ignored when `skim.top_fraction` set).
    pub skim_threshold: f64,
    /// Top-fraction alternative rule; `None` selects thresholding.
    pub skim_top_fraction: Option<f64>,
    /// Skim-active layers; `None` means all but layer 0.
    pub skim_layers: Option<Vec<usize>>,
    /// Fraction of the training file held out as dev when no --dev given.
    pub dev_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            predictor: PredictorConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            skim_threshold: 0.5,
            skim_top_fraction: None,
            skim_layers: None,
            dev_fraction: 0.1,
        }
    }
}

impl RunConfig {
    pub fn policy(&self) -> SkimPolicy {
        let rule = match self.skim_top_fraction {
            Some(f) => SkimRule::TopFraction(f),
            None => SkimRule::Threshold(self.skim_threshold),
        };
        let active_layers = match &self.skim_layers {
            Some(l) => l.clone(),
            None => (1..self.model.num_layers).collect(),
        };
        SkimPolicy {
            rule,
            active_layers,
        }
    }

    pub fn parse_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn apply_overrides(&mut self, sets: &[String]) -> Result<()> {
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set needs key=value, got `{s}`")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn usize_v(key: &str, v: &str) -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: expected integer, got `{v}`")))
        }
        fn f64_v(key: &str, v: &str) -> Result<f64> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: expected number, got `{v}`")))
        }
        fn u64_v(key: &str, v: &str) -> Result<u64> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: expected integer, got `{v}`")))
        }
        fn bool_v(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(Error::Config(format!("{key}: expected bool, got `{v}`"))),
            }
        }
        match key {
            "model.num_layers" => self.model.num_layers = usize_v(key, value)?,
            "model.num_heads" => self.model.num_heads = usize_v(key, value)?,
            "model.hidden_dim" => self.model.hidden_dim = usize_v(key, value)?,
            "model.ffn_dim" => self.model.ffn_dim = usize_v(key, value)?,
            "model.vocab_size" => self.model.vocab_size = usize_v(key, value)?,
            "model.max_seq_len" => self.model.max_seq_len = usize_v(key, value)?,
            "model.dropout_rate" => self.model.dropout_rate = f64_v(key, value)?,
            "predictor.c1" => self.predictor.c1 = usize_v(key, value)?,
            "predictor.c2" => self.predictor.c2 = usize_v(key, value)?,
            "predictor.c3" => self.predictor.c3 = usize_v(key, value)?,
            "train.lr" => self.train.lr = f64_v(key, value)?,
            "train.batch_size" => self.train.batch_size = usize_v(key, value)?,
            "train.epochs" => self.train.epochs = usize_v(key, value)?,
            "train.alpha" => self.train.alpha = f64_v(key, value)?,
            "train.beta" => {
                self.train.beta = if value == "auto" {
                    None
                } else {
                    Some(f64_v(key, value)?)
                }
            }
            "train.block_size" => self.train.block_size = usize_v(key, value)?,
            "train.seed" => self.train.seed = u64_v(key, value)?,
            "train.mode" => self.train.mode = parse_mode(value)?,
            "train.evidence_labels" => self.train.evidence_labels = bool_v(key, value)?,
            "train.dev_fraction" => self.dev_fraction = f64_v(key, value)?,
            "skim.threshold" => self.skim_threshold = f64_v(key, value)?,
            "skim.top_fraction" => {
                self.skim_top_fraction = if value == "none" {
                    None
                } else {
                    Some(f64_v(key, value)?)
                }
            }
            "skim.layers" => {
                self.skim_layers = if value == "default" {
                    None
                } else {
                    Some(parse_layer_list(value)?)
                }
            }
            "synth.vocab_size" => self.synth.vocab_size = usize_v(key, value)?,
            "synth.seq_len" => self.synth.seq_len = usize_v(key, value)?,
            "synth.question_len" => self.synth.question_len = usize_v(key, value)?,
            "synth.answer_len" => self.synth.answer_len = usize_v(key, value)?,
            "synth.num_distractors" => self.synth.num_distractors = usize_v(key, value)?,
            "synth.evidence_mode" => self.synth.evidence_mode = bool_v(key, value)?,
            "synth.seed" => self.synth.seed = u64_v(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Dump in the exact format `parse_file` accepts.
    pub fn dump(&self) -> String {
        let mode = mode_name(self.train.mode);
        let beta = self
            .train
            .beta
            .map_or_else(|| "auto".to_string(), |b| format!("{b}"));
        let top_fraction = self
            .skim_top_fraction
            .map_or_else(|| "none".to_string(), |f| format!("{f}"));
        let layers = self.skim_layers.as_ref().map_or_else(
            || "default".to_string(),
            |l| {
                l.iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            },
        );
        format!(
            "model.num_layers = {}\nmodel.num_heads = {}\nmodel.hidden_dim = {}\n\
             model.ffn_dim = {}\nmodel.vocab_size = {}\nmodel.max_seq_len = {}\n\
             model.dropout_rate = {}\npredictor.c1 = {}\npredictor.c2 = {}\n\
             predictor.c3 = {}\ntrain.lr = {}\ntrain.batch_size = {}\ntrain.epochs = {}\n\
             train.alpha = {}\ntrain.beta = {}\ntrain.block_size = {}\ntrain.seed = {}\n\
             train.mode = {}\ntrain.evidence_labels = {}\ntrain.dev_fraction = {}\n\
             skim.threshold = {}\nskim.top_fraction = {}\nskim.layers = {}\n\
             synth.vocab_size = {}\nsynth.seq_len = {}\nsynth.question_len = {}\n\
             synth.answer_len = {}\nsynth.num_distractors = {}\nsynth.evidence_mode = {}\n\
             synth.seed = {}\n",
            self.model.num_layers,
            self.model.num_heads,
            self.model.hidden_dim,
            self.model.ffn_dim,
            self.model.vocab_size,
            self.model.max_seq_len,
            self.model.dropout_rate,
            self.predictor.c1,
            self.predictor.c2,
            self.predictor.c3,
            self.train.lr,
            self.train.batch_size,
            self.train.epochs,
            self.train.alpha,
            beta,
            self.train.block_size,
            self.train.seed,
            mode,
            self.train.evidence_labels,
            self.dev_fraction,
            self.skim_threshold,
            top_fraction,
            layers,
            self.synth.vocab_size,
            self.synth.seq_len,
            self.synth.question_len,
            self.synth.answer_len,
            self.synth.num_distractors,
            self.synth.evidence_mode,
            self.synth.seed,
        )
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key = value, got `{line}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

pub fn parse_mode(value: &str) -> Result<TrainMode> {
    match value {
        "joint" => Ok(TrainMode::Joint),
        "vanilla" => Ok(TrainMode::Vanilla),
        "freeze" => Ok(TrainMode::FreezeTransformer),
        "skim-train" => Ok(TrainMode::SkimTraining),
        _ => Err(Error::Config(format!(
            "unknown mode `{value}` (joint|vanilla|freeze|skim-train)"
        ))),
    }
}

pub fn mode_name(mode: TrainMode) -> &'static str {
    match mode {
        TrainMode::Joint => "joint",
        TrainMode::Vanilla => "vanilla",
        TrainMode::FreezeTransformer => "freeze",
        TrainMode::SkimTraining => "skim-train",
    }
}

pub fn parse_layer_list(value: &str) -> Result<Vec<usize>> {
    if value.is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad layer index `{p}`")))
        })
        .collect()
}
