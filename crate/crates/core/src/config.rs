//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key is optional; unknown
//! keys and repeated keys are errors. Command-line `--set key=value`
//! overrides go through the same parser after the file.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::corpus::{CorpusSpec, Split};
use crate::error::{ArlError, Result};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub corpus: CorpusSpec,
    pub train: TrainConfig,
}

pub const KEYS: &[&str] = &[
    "n_q",
    "n_v",
    "l_q",
    "l_v",
    "d_t",
    "d_v",
    "corpus_seed",
    "segments_per_video",
    "ambiguity_rate",
    "noise_scale",
    "latent_dim",
    "plants_per_query",
    "split",
    "seed",
    "epochs",
    "batch_size",
    "embed_dim",
    "learning_rate",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "weight_decay",
    "cross_model",
    "text_frame",
    "margin_m",
    "margin_ma",
    "lambda_nce",
    "warmup_epochs",
    "temperature",
];

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| ArlError::config(format!("invalid value {raw:?} for key {key}")))
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let c = &mut self.corpus;
        let t = &mut self.train;
        match key {
            "n_q" => c.n_q = parse_value(key, raw)?,
            "n_v" => c.n_v = parse_value(key, raw)?,
            "l_q" => c.l_q = parse_value(key, raw)?,
            "l_v" => c.l_v = parse_value(key, raw)?,
            "d_t" => c.d_t = parse_value(key, raw)?,
            "d_v" => c.d_v = parse_value(key, raw)?,
            "corpus_seed" => c.seed = parse_value(key, raw)?,
            "segments_per_video" => c.segments_per_video = parse_value(key, raw)?,
            "ambiguity_rate" => c.ambiguity_rate = parse_value(key, raw)?,
            "noise_scale" => c.noise_scale = parse_value(key, raw)?,
            "latent_dim" => c.latent_dim = parse_value(key, raw)?,
            "plants_per_query" => c.plants_per_query = parse_value(key, raw)?,
            "split" => c.split = Split::parse(raw)?,
            "seed" => t.seed = parse_value(key, raw)?,
            "epochs" => t.epochs = parse_value(key, raw)?,
            "batch_size" => t.batch_size = parse_value(key, raw)?,
            "embed_dim" => t.embed_dim = parse_value(key, raw)?,
            "learning_rate" => t.learning_rate = parse_value(key, raw)?,
            "adam_beta1" => t.adam_beta1 = parse_value(key, raw)?,
            "adam_beta2" => t.adam_beta2 = parse_value(key, raw)?,
            "adam_eps" => t.adam_eps = parse_value(key, raw)?,
            "weight_decay" => t.weight_decay = parse_value(key, raw)?,
            "cross_model" => t.cross_model = parse_value(key, raw)?,
            "text_frame" => t.text_frame = parse_value(key, raw)?,
            "margin_m" => t.loss.margin_m = parse_value(key, raw)?,
            "margin_ma" => t.loss.margin_ma = parse_value(key, raw)?,
            "lambda_nce" => t.loss.lambda_nce = parse_value(key, raw)?,
            "warmup_epochs" => t.loss.warmup_epochs = parse_value(key, raw)?,
            "temperature" => t.loss.temperature = parse_value(key, raw)?,
            other => return Err(ArlError::config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = split_assignment(line)
                .map_err(|e| ArlError::config(format!("line {}: {e}", n + 1)))?;
            if !seen.insert(key.to_string()) {
                return Err(ArlError::config(format!(
                    "line {}: duplicate key {key}",
                    n + 1
                )));
            }
            self.set(key, value).map_err(|e| match e {
                ArlError::Config(m) => ArlError::config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Applies a single `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = split_assignment(assignment).map_err(ArlError::config)?;
        self.set(key, value)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.train.validate()
    }

    /// Every key with its resolved value, in [`KEYS`] order; parses back to `self`.
    pub fn to_text(&self) -> String {
        let c = &self.corpus;
        let t = &self.train;
        let values: Vec<String> = vec![
            c.n_q.to_string(),
            c.n_v.to_string(),
            c.l_q.to_string(),
            c.l_v.to_string(),
            c.d_t.to_string(),
            c.d_v.to_string(),
            c.seed.to_string(),
            c.segments_per_video.to_string(),
            format!("{:?}", c.ambiguity_rate),
            format!("{:?}", c.noise_scale),
            c.latent_dim.to_string(),
            c.plants_per_query.to_string(),
            c.split.as_str().to_string(),
            t.seed.to_string(),
            t.epochs.to_string(),
            t.batch_size.to_string(),
            t.embed_dim.to_string(),
            format!("{:?}", t.learning_rate),
            format!("{:?}", t.adam_beta1),
            format!("{:?}", t.adam_beta2),
            format!("{:?}", t.adam_eps),
            format!("{:?}", t.weight_decay),
            t.cross_model.to_string(),
            t.text_frame.to_string(),
            format!("{:?}", t.loss.margin_m),
            format!("{:?}", t.loss.margin_ma),
            format!("{:?}", t.loss.lambda_nce),
            t.loss.warmup_epochs.to_string(),
            format!("{:?}", t.loss.temperature),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }
}

fn split_assignment(s: &str) -> std::result::Result<(&str, &str), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected key=value, got {s:?}"))?;
    let (k, v) = (k.trim(), v.trim());
    if k.is_empty() || v.is_empty() {
        return Err(format!("expected key=value, got {s:?}"));
    }
    Ok((k, v))
}
