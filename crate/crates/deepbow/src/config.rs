//! Run configuration: one JSON file with `vocab`, `model`, `train`,
//! `truncation`, and `serve` sections. Every field has a desk-scale default,
//! so a partial (or empty) config is valid.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::training::TrainConfig;
use crate::Result;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub vocab: VocabConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub truncation: TruncationConfig,
    #[serde(default)]
    pub serve: ServeConfig,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: Config = serde_json::from_str(&text)?;
        config.model.validate()?;
        config.truncation.validate()?;
        Ok(config)
    }
}

/// Vocabulary build settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabConfig {
    /// In-vocabulary word count.
    #[serde(default = "default_v")]
    pub v: usize,
    /// Hashing bucket count.
    #[serde(rename = "B", default = "default_b")]
    pub b: usize,
    /// Maximum n-gram length (1 = unigrams only).
    #[serde(default = "default_ngram")]
    pub ngram_order: usize,
    /// Registered segmenter id.
    #[serde(default = "default_segmenter")]
    pub segmenter: String,
}

fn default_v() -> usize {
    2000
}
fn default_b() -> usize {
    200
}
fn default_ngram() -> usize {
    1
}
fn default_segmenter() -> String {
    "whitespace".into()
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            v: default_v(),
            b: default_b(),
            ngram_order: default_ngram(),
            segmenter: default_segmenter(),
        }
    }
}

/// Encoder hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Model width.
    #[serde(default = "default_d")]
    pub d: usize,
    /// Transformer layer count.
    #[serde(rename = "L", default = "default_layers")]
    pub layers: usize,
    /// Attention head count; must divide `d`.
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// Feed-forward inner width.
    #[serde(default = "default_ffn")]
    pub ffn: usize,
    /// Maximum token sequence length per stream; longer inputs are truncated.
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

fn default_d() -> usize {
    64
}
fn default_layers() -> usize {
    2
}
fn default_heads() -> usize {
    4
}
fn default_ffn() -> usize {
    256
}
fn default_max_len() -> usize {
    128
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: default_d(),
            layers: default_layers(),
            heads: default_heads(),
            ffn: default_ffn(),
            max_len: default_max_len(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.layers == 0 || self.heads == 0 || self.ffn == 0 || self.max_len == 0
        {
            return Err(crate::DeepBowError::Config(
                "model dimensions must all be positive".into(),
            ));
        }
        if self.d % self.heads != 0 {
            return Err(crate::DeepBowError::Config(format!(
                "heads ({}) must divide d ({})",
                self.heads, self.d
            )));
        }
        Ok(())
    }
}

/// How a dense expansion vector is sparsified for storage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum TruncationConfig {
    /// Keep the `k` largest weights.
    Topk { k: usize },
    /// Keep weights ≥ `tau`.
    Threshold { tau: f64 },
}

impl Default for TruncationConfig {
    fn default() -> Self {
        TruncationConfig::Threshold { tau: 0.4 }
    }
}

impl TruncationConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TruncationConfig::Topk { k } if k == 0 => Err(crate::DeepBowError::Config(
                "truncation k must be ≥ 1".into(),
            )),
            TruncationConfig::Threshold { tau } if !(0.0..=1.0).contains(&tau) => Err(
                crate::DeepBowError::Config(format!("truncation tau must be in [0,1], got {tau}")),
            ),
            _ => Ok(()),
        }
    }
}

/// Service settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeConfig {
    #[serde(default = "default_port")]
    pub port: u16,
    /// Scores at or above this are answered with decision "good".
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_port() -> u16 {
    7878
}
fn default_threshold() -> f64 {
    0.5
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            port: default_port(),
            threshold: default_threshold(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gets_desk_defaults() {
        let config: Config = serde_json::from_str("{}").unwrap();
        assert_eq!(config.model.d, 64);
        assert_eq!(config.model.layers, 2);
        assert_eq!(config.model.heads, 4);
        assert_eq!(config.model.ffn, 256);
        assert_eq!(config.model.max_len, 128);
        assert_eq!(config.vocab.segmenter, "whitespace");
        assert_eq!(
            config.truncation,
            TruncationConfig::Threshold { tau: 0.4 }
        );
        assert_eq!(config.serve.threshold, 0.5);
    }

    #[test]
    fn uppercase_section_keys_parse() {
        let config: Config = serde_json::from_str(
            r#"{"vocab":{"v":50000,"B":10000},"model":{"L":2,"d":64},
                "truncation":{"mode":"topk","k":128}}"#,
        )
        .unwrap();
        assert_eq!(config.vocab.v, 50000);
        assert_eq!(config.vocab.b, 10000);
        assert_eq!(config.truncation, TruncationConfig::Topk { k: 128 });
    }

    #[test]
    fn heads_must_divide_d() {
        let model: ModelConfig = serde_json::from_str(r#"{"d":64,"heads":5}"#).unwrap();
        assert!(model.validate().is_err());
    }
}
