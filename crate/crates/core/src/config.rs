//! Training run settings read from a line-oriented `key = value` file.
//!
//! Blank lines and lines starting with `#` are ignored. Later assignments
//! override earlier ones, so command-line overrides are applied with
//! [`RunSettings::set`] after the file is parsed.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{ImageAttention, ModelConfig};
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunSettings {
    pub train_src: Option<PathBuf>,
    pub train_tgt: Option<PathBuf>,
    pub train_features: Option<PathBuf>,
    pub dev_src: Option<PathBuf>,
    pub dev_tgt: Option<PathBuf>,
    pub dev_features: Option<PathBuf>,
    /// Checkpoint of the best epoch.
    pub output: PathBuf,
    /// Training log; stdout when absent.
    pub log: Option<PathBuf>,
    pub min_count: usize,
    pub embed_dim: usize,
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    pub out_dim: usize,
    pub image_attention: ImageAttention,
    pub gating: bool,
    pub doubling: bool,
    pub grounding: bool,
    pub grounding_hidden: usize,
    pub local_half_width: Option<usize>,
    /// `None` picks the default for the attention mode.
    pub batch_size: Option<usize>,
    pub train: TrainConfig,
}

impl Default for RunSettings {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            train_src: None,
            train_tgt: None,
            train_features: None,
            dev_src: None,
            dev_tgt: None,
            dev_features: None,
            output: PathBuf::from("model.mmck"),
            log: None,
            min_count: 1,
            embed_dim: m.embed_dim,
            enc_hidden: m.enc_hidden,
            dec_hidden: m.dec_hidden,
            out_dim: m.out_dim,
            image_attention: m.image_attention,
            gating: false,
            doubling: false,
            grounding: false,
            grounding_hidden: m.grounding_hidden,
            local_half_width: None,
            batch_size: None,
            train: TrainConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

/// Splits `text` into `(key, value)` pairs.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunSettings {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut s = Self::default();
        for (k, v) in parse_pairs(text)? {
            s.set(&k, &v)?;
        }
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Applies one assignment; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let path = || Some(PathBuf::from(value));
        match key {
            "train_src" => self.train_src = path(),
            "train_tgt" => self.train_tgt = path(),
            "train_features" => self.train_features = path(),
            "dev_src" => self.dev_src = path(),
            "dev_tgt" => self.dev_tgt = path(),
            "dev_features" => self.dev_features = path(),
            "output" => self.output = PathBuf::from(value),
            "log" => self.log = path(),
            "min_count" => self.min_count = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "enc_hidden" => self.enc_hidden = parse(key, value)?,
            "dec_hidden" => self.dec_hidden = parse(key, value)?,
            "out_dim" => self.out_dim = parse(key, value)?,
            "image_attention" => self.image_attention = parse(key, value)?,
            "gating" => self.gating = parse_bool(key, value)?,
            "doubling" => self.doubling = parse_bool(key, value)?,
            "grounding" => self.grounding = parse_bool(key, value)?,
            "grounding_hidden" => self.grounding_hidden = parse(key, value)?,
            "local_half_width" => self.local_half_width = Some(parse(key, value)?),
            "batch_size" => self.batch_size = Some(parse(key, value)?),
            "dropout" => self.train.dropout = parse(key, value)?,
            "patience" => self.train.patience = parse(key, value)?,
            "max_epochs" => self.train.max_epochs = parse(key, value)?,
            "seed" => self.train.seed = parse(key, value)?,
            "samples" => self.train.samples = parse(key, value)?,
            "record_wall_time" => self.train.record_wall_time = parse_bool(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {assignment:?}")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn model_config(&self, src_vocab: usize, tgt_vocab: usize, img_dim: usize) -> ModelConfig {
        ModelConfig {
            src_vocab,
            tgt_vocab,
            embed_dim: self.embed_dim,
            enc_hidden: self.enc_hidden,
            dec_hidden: self.dec_hidden,
            out_dim: self.out_dim,
            img_dim,
            image_attention: self.image_attention,
            gating: self.gating,
            doubling: self.doubling,
            grounding: self.grounding,
            grounding_hidden: self.grounding_hidden,
            local_half_width: self.local_half_width,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size.unwrap_or_else(|| TrainConfig::default_batch_size(self.image_attention)),
            ..self.train.clone()
        }
    }
}
