//! Run configuration: one TOML document with a table per concern. Every
//! field has a default, unknown keys are rejected, and the effective
//! configuration is identified by a short hash of its canonical form.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evalmetrics::EvalConfig;
use crate::synthdata::SceneConfig;
use crate::trainer::TrainConfig;

/// Hex digits kept from the SHA-256 of the canonical configuration.
pub const HASH_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_images: usize,
    pub eval_images: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train_images: 200, eval_images: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub seeds: Vec<u64>,
    /// Localization weights for the loss-ratio sweep.
    pub lambdas: Vec<f64>,
    /// Post-processing thresholds for the score-threshold sweep.
    pub score_thresholds: Vec<f64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            lambdas: vec![1.0, 0.33, 3.0],
            score_thresholds: vec![0.1, 0.2, 0.3, 0.4, 0.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub scene: SceneConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

fn field_error(field: &str, message: impl Into<String>) -> Error {
    Error::Config { field: field.into(), message: message.into() }
}

fn in_table(table: &str, e: Error) -> Error {
    match e {
        Error::Config { field, message } => field_error(&format!("{table}.{field}"), message),
        other => field_error(table, other.to_string()),
    }
}

/// Dotted `table.key` path of the entry containing byte offset `at`.
fn key_at(text: &str, at: usize) -> Option<String> {
    let at = at.min(text.len());
    let line_start = text[..at].rfind('\n').map_or(0, |i| i + 1);
    let line_end = text[at..].find('\n').map_or(text.len(), |i| at + i);
    let line = &text[line_start..line_end];
    let key = line.split('=').next()?.trim();
    if key.is_empty() || key.starts_with('[') {
        return None;
    }
    let table = text[..line_start]
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| l.starts_with('[') && l.ends_with(']'))
        .map(|l| l.trim_matches(|c| c == '[' || c == ']').trim().to_string());
    Some(match table {
        Some(t) => format!("{t}.{key}"),
        None => key.to_string(),
    })
}

impl RunConfig {
    /// Parses a TOML document; missing keys take their defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let field = e.span().and_then(|s| key_at(text, s.start)).unwrap_or_else(|| "<document>".to_string());
            field_error(&field, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    /// Canonical TOML with every field spelled out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Leading hex digits of the SHA-256 of [`RunConfig::to_toml`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect::<String>()[..HASH_LEN].to_string()
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.train_images == 0 {
            return Err(field_error("data.train_images", "must be at least 1"));
        }
        if self.data.eval_images == 0 {
            return Err(field_error("data.eval_images", "must be at least 1"));
        }
        self.scene.validate().map_err(|e| in_table("scene", e))?;
        self.train.validate().map_err(|e| in_table("train", e))?;
        self.eval.validate().map_err(|e| in_table("eval", e))?;
        if self.ablate.seeds.is_empty() {
            return Err(field_error("ablate.seeds", "needs at least one seed"));
        }
        if self.ablate.lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(field_error("ablate.lambdas", "entries must be finite and non-negative"));
        }
        if self.ablate.score_thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(field_error("ablate.score_thresholds", "entries must lie in [0, 1]"));
        }
        Ok(())
    }
}
