//! Run configuration in line-based `key = value` form.
//!
//! The same text form is used for config files, command-line overrides
//! and the checkpoint config block. Lines starting with `#` are comments.

use std::fmt::Write as _;
use std::path::Path;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::model::ModelConfig;
use crate::pooling::{PoolingConfig, PoolingKind};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    /// The full-size recipe.
    fn default() -> Self {
        RunConfig {
            model: ModelConfig {
                features: FeatureConfig::default(),
                encoder: EncoderConfig::full_scale(),
                pooling: PoolingConfig::new(PoolingKind::DoubleMha, 32),
                hidden: 400,
                num_speakers: 5994,
                am_scale: 30.0,
                am_margin: 0.4,
            },
            train: TrainConfig::default(),
        }
    }
}

/// Every recognized key, in serialization order.
pub const KEYS: &[&str] = &[
    "sample_rate",
    "win_length",
    "hop",
    "n_fft",
    "n_mels",
    "fmin",
    "fmax",
    "channels",
    "pooling",
    "heads",
    "hidden",
    "num_speakers",
    "am_scale",
    "am_margin",
    "chunk_frames",
    "batch_size",
    "lr",
    "weight_decay",
    "epochs",
    "anneal_patience",
    "anneal_factor",
    "validation_fraction",
    "seed",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("cannot parse {key} = {value:?}")))
}

/// Splits `key = value` lines, skipping blanks and `#` comments.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            what: "config",
            line: i + 1,
            reason: format!("expected key = value, got {line:?}"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Small model for quick experiments on the synthetic corpus.
    pub fn desk() -> Self {
        let mut c = RunConfig::default();
        c.model.encoder = EncoderConfig::doubling(8, 80);
        c.model.pooling = PoolingConfig::new(PoolingKind::DoubleMha, 8);
        c.model.hidden = 64;
        c.model.num_speakers = 16;
        c.train.chunk_frames = 200;
        c.train.batch_size = 16;
        c.train.lr = 2e-3;
        c.train.max_epochs = 30;
        c.train.validation_fraction = 0.1;
        c
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "sample_rate" => m.features.sample_rate = parse(key, value)?,
            "win_length" => m.features.win_length = parse(key, value)?,
            "hop" => m.features.hop = parse(key, value)?,
            "n_fft" => m.features.n_fft = parse(key, value)?,
            "n_mels" => {
                m.features.n_mels = parse(key, value)?;
                m.encoder.n_mels = m.features.n_mels;
            }
            "fmin" => m.features.fmin = parse(key, value)?,
            "fmax" => m.features.fmax = parse(key, value)?,
            "channels" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_>>()?;
                m.encoder.channels = parts.try_into().map_err(|_| {
                    Error::config(format!("channels needs 4 comma-separated values, got {value:?}"))
                })?;
            }
            "pooling" => m.pooling.kind = value.parse()?,
            "heads" => m.pooling.heads = parse(key, value)?,
            "hidden" => m.hidden = parse(key, value)?,
            "num_speakers" => m.num_speakers = parse(key, value)?,
            "am_scale" => m.am_scale = parse(key, value)?,
            "am_margin" => m.am_margin = parse(key, value)?,
            "chunk_frames" => t.chunk_frames = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "epochs" => t.max_epochs = parse(key, value)?,
            "anneal_patience" => t.anneal_patience = parse(key, value)?,
            "anneal_factor" => t.anneal_factor = parse(key, value)?,
            "validation_fraction" => t.validation_fraction = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            other => return Err(Error::config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        let t = &self.train;
        // floats use `{:?}` so they round-trip exactly
        Some(match key {
            "sample_rate" => m.features.sample_rate.to_string(),
            "win_length" => m.features.win_length.to_string(),
            "hop" => m.features.hop.to_string(),
            "n_fft" => m.features.n_fft.to_string(),
            "n_mels" => m.features.n_mels.to_string(),
            "fmin" => format!("{:?}", m.features.fmin),
            "fmax" => format!("{:?}", m.features.fmax),
            "channels" => m
                .encoder
                .channels
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(","),
            "pooling" => m.pooling.kind.to_string(),
            "heads" => m.pooling.heads.to_string(),
            "hidden" => m.hidden.to_string(),
            "num_speakers" => m.num_speakers.to_string(),
            "am_scale" => format!("{:?}", m.am_scale),
            "am_margin" => format!("{:?}", m.am_margin),
            "chunk_frames" => t.chunk_frames.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "lr" => format!("{:?}", t.lr),
            "weight_decay" => format!("{:?}", t.weight_decay),
            "epochs" => t.max_epochs.to_string(),
            "anneal_patience" => t.anneal_patience.to_string(),
            "anneal_factor" => format!("{:?}", t.anneal_factor),
            "validation_fraction" => format!("{:?}", t.validation_fraction),
            "seed" => t.seed.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` pairs on top of `self`.
    pub fn apply_pairs<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let pairs = parse_pairs(text)?;
        self.apply_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        KEYS.iter()
            .map(|k| (k.to_string(), self.get(k).expect("known key")))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Cross-field checks: feature/encoder agreement, head divisibility,
    /// dimension chaining and training ranges.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}
