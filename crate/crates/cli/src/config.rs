//! Run configuration: an INI file with sections, overridden by flags.
//!
//! Keys are addressed as `section.key`. Unknown keys are rejected so typos do
//! not silently fall back to defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;

use sebertnets::data::SynthConfig;
use sebertnets::encoder::EncoderConfig;
use sebertnets::eval::MatchMode;
use sebertnets::model::{ModelConfig, ModelVariant};
use sebertnets::optim::{AdamConfig, OptimizerConfig, OptimizerKind};
use sebertnets::sequence::{CellKind, SequenceConfig};
use sebertnets::span::{Channel, RecallConfig};
use sebertnets::train::TrainConfig;

use crate::CliError;

const KEYS: &[&str] = &[
    "model.variant",
    "model.d_model",
    "model.n_layers",
    "model.n_heads",
    "model.d_ff",
    "model.max_len",
    "model.dropout",
    "model.cell",
    "model.hidden",
    "recall.k",
    "recall.max_span_len",
    "recall.channels",
    "train.epochs",
    "train.batch_size",
    "train.clip_norm",
    "train.seed",
    "optimizer.kind",
    "optimizer.lr",
    "optimizer.beta1",
    "optimizer.beta2",
    "optimizer.eps",
    "optimizer.sgd_lr",
    "optimizer.eps_switch",
    "eval.top_k",
    "eval.match_mode",
    "data.train",
    "data.dev",
    "output.checkpoint",
    "output.log",
    "synth.n_examples",
    "synth.multi_entity_fraction",
    "synth.min_distractors",
    "synth.max_distractors",
    "synth.seed",
];

/// Flat `section.key -> value` map.
#[derive(Clone, Debug, Default)]
pub struct Settings(BTreeMap<String, String>);

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut out = Self::default();
        let Some(path) = path else {
            return Ok(out);
        };
        let ini = Ini::load_from_file(path).map_err(|e| match e {
            ini::Error::Io(e) => CliError::Data(format!("{}: {e}", path.display())),
            ini::Error::Parse(e) => CliError::Usage(format!("{}: {e}", path.display())),
        })?;
        for (section, props) in ini.iter() {
            for (key, value) in props.iter() {
                let full = match section {
                    Some(s) => format!("{s}.{key}"),
                    None => key.to_string(),
                };
                out.set(&full, value)?;
            }
        }
        Ok(out)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        if !KEYS.contains(&key) {
            return Err(CliError::Usage(format!("unknown config key `{key}`")));
        }
        self.0.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    /// Applies a `section.key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("expected section.key=value, got `{pair}`")))?;
        self.set(k.trim(), v)
    }

    pub fn set_opt<V: ToString>(&mut self, key: &str, value: Option<V>) -> Result<(), CliError> {
        match value {
            Some(v) => self.set(key, &v.to_string()),
            None => Ok(()),
        }
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    fn get<V: FromStr>(&self, key: &str, default: V) -> Result<V, CliError>
    where
        V::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|e| CliError::Usage(format!("bad value `{s}` for {key}: {e}"))),
        }
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.raw(key).filter(|s| !s.is_empty()).map(PathBuf::from)
    }
}

/// Everything `train` needs.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub train_path: PathBuf,
    pub dev_path: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

impl RunConfig {
    pub fn from_settings(s: &Settings) -> Result<Self, CliError> {
        let model = model_config(s)?;
        let train = train_config(s)?;
        let train_path = s
            .path("data.train")
            .ok_or_else(|| CliError::Usage("data.train is required".into()))?;
        let checkpoint = s
            .path("output.checkpoint")
            .ok_or_else(|| CliError::Usage("output.checkpoint is required".into()))?;
        let log = s
            .path("output.log")
            .unwrap_or_else(|| checkpoint.with_extension("log.jsonl"));
        let dev_path = s.path("data.dev");
        for p in std::iter::once(&train_path).chain(dev_path.as_ref()) {
            if !p.is_file() {
                return Err(CliError::Data(format!("{} does not exist", p.display())));
            }
        }
        Ok(Self {
            model,
            train,
            train_path,
            dev_path,
            checkpoint,
            log,
        })
    }
}

fn model_config(s: &Settings) -> Result<ModelConfig, CliError> {
    let enc = EncoderConfig::default();
    let seq = SequenceConfig::default();
    let recall = RecallConfig::default();
    let channels = match s.raw("recall.channels") {
        None => recall.channels,
        Some(list) => list
            .split(',')
            .filter(|c| !c.trim().is_empty())
            .map(Channel::from_str)
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::Usage(e.to_string()))?,
    };
    let cfg = ModelConfig {
        variant: s.get("model.variant", ModelVariant::Hsebertnets)?,
        encoder: EncoderConfig {
            d_model: s.get("model.d_model", enc.d_model)?,
            n_layers: s.get("model.n_layers", enc.n_layers)?,
            n_heads: s.get("model.n_heads", enc.n_heads)?,
            d_ff: s.get("model.d_ff", enc.d_ff)?,
            max_len: s.get("model.max_len", enc.max_len)?,
            vocab_size: 0,
            dropout: s.get("model.dropout", enc.dropout)?,
        },
        sequence: SequenceConfig {
            cell: s.get("model.cell", CellKind::Gru)?,
            hidden: s.get("model.hidden", seq.hidden)?,
        },
        recall: RecallConfig {
            k: s.get("recall.k", s.get("eval.top_k", recall.k)?)?,
            max_span_len: s.get("recall.max_span_len", recall.max_span_len)?,
            channels,
        },
        seed: s.get("train.seed", 0)?,
    };
    cfg.recall.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn train_config(s: &Settings) -> Result<TrainConfig, CliError> {
    let d = TrainConfig::default();
    let adam = AdamConfig::default();
    let opt = OptimizerConfig::default();
    let cfg = TrainConfig {
        epochs: s.get("train.epochs", d.epochs)?,
        batch_size: s.get("train.batch_size", d.batch_size)?,
        clip_norm: s.get("train.clip_norm", d.clip_norm)?,
        seed: s.get("train.seed", d.seed)?,
        optimizer: OptimizerConfig {
            kind: s.get::<OptimizerKind>("optimizer.kind", opt.kind)?,
            adam: AdamConfig {
                lr: s.get("optimizer.lr", adam.lr)?,
                beta1: s.get("optimizer.beta1", adam.beta1)?,
                beta2: s.get("optimizer.beta2", adam.beta2)?,
                eps: s.get("optimizer.eps", adam.eps)?,
            },
            sgd_lr: s.get("optimizer.sgd_lr", opt.sgd_lr)?,
            eps_switch: s.get("optimizer.eps_switch", opt.eps_switch)?,
        },
        top_k: s.get("eval.top_k", d.top_k)?,
        match_mode: s.get::<MatchMode>("eval.match_mode", d.match_mode)?,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

pub fn synth_config(s: &Settings) -> Result<(SynthConfig, u64), CliError> {
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        n_examples: s.get("synth.n_examples", d.n_examples)?,
        multi_entity_fraction: s.get("synth.multi_entity_fraction", d.multi_entity_fraction)?,
        min_distractors: s.get("synth.min_distractors", d.min_distractors)?,
        max_distractors: s.get("synth.max_distractors", d.max_distractors)?,
    };
    if !(0.0..=1.0).contains(&cfg.multi_entity_fraction) || cfg.min_distractors > cfg.max_distractors {
        return Err(CliError::Usage(format!("invalid synth settings {cfg:?}")));
    }
    Ok((cfg, s.get("synth.seed", 0)?))
}
