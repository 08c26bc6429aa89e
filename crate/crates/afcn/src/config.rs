//! Run configuration: serde-backed defaults, JSON config files, and
//! dotted-path CLI overrides. Every run snapshots its effective settings to
//! `resolved_config.json`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DtMode {
    /// τ = μ + β·σ over off-diagonal |corr| per band per subject.
    Dynamic,
    /// Keep the top 25% of off-diagonal entries (ablation baseline).
    Fixed25,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub k_levels: usize,
    pub w_low: usize,
    pub w_high: usize,
    pub leaky_slope: f64,
    pub init_noise: f64,
    pub attn_dim: usize,
    pub gcn_hidden: usize,
    pub gcn_out: usize,
    pub mlp_hidden: usize,
    pub lambda_init: f64,
    pub dt_mode: DtMode,
    pub dt_beta: f64,
    pub top_q: f64,
    pub intra_binary: bool,
    pub final_activation: bool,
    /// Raw-series Pearson + GCN baseline (no decomposition, no coupling).
    pub single_band: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k_levels: 2,
            w_low: 5,
            w_high: 3,
            leaky_slope: 0.01,
            init_noise: 0.01,
            attn_dim: 32,
            gcn_hidden: 64,
            gcn_out: 64,
            mlp_hidden: 128,
            lambda_init: 0.1,
            dt_mode: DtMode::Dynamic,
            dt_beta: 0.5,
            top_q: 0.25,
            intra_binary: false,
            final_activation: false,
            single_band: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { lr: 1e-3, weight_decay: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Weight cross-entropy by inverse class frequency.
    pub class_weighted: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda1: 0.1, lambda2: 0.001, class_weighted: false }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub folds: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub losses: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 42,
            folds: 10,
            max_epochs: 200,
            patience: 15,
            batch_size: 32,
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            losses: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience < 1 {
            return Err(Error::Config("patience must be ≥ 1".to_string()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be ≥ 1".to_string()));
        }
        if self.losses.lambda1 < 0.0 || self.losses.lambda2 < 0.0 {
            return Err(Error::Config("loss weights must be ≥ 0".to_string()));
        }
        if !self.model.single_band && self.model.k_levels < 1 {
            return Err(Error::Config("k_levels must be ≥ 1".to_string()));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { lambda1: self.losses.lambda1, lambda2: self.losses.lambda2 }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: TrainConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("bad config JSON: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply a dotted-path override such as `losses.lambda1=0` or
    /// `model.dt_mode=fixed25`. Flags beat the config file.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (path, raw) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {spec:?} must be key=value")))?;
        let mut value = serde_json::to_value(&*self).unwrap();
        let pointer = format!("/{}", path.replace('.', "/"));
        let slot = value
            .pointer_mut(&pointer)
            .ok_or_else(|| Error::Config(format!("unknown config key {path:?}")))?;
        *slot = parse_override_value(raw);
        let updated: TrainConfig = serde_json::from_value(value)
            .map_err(|e| Error::Config(format!("bad override {spec:?}: {e}")))?;
        *self = updated;
        self.validate()
    }

    pub fn resolved_json(&self) -> String {
        serde_json::to_string_pretty(self).unwrap()
    }

    /// Stable hash covering everything that determines the parameter
    /// shapes/semantics of a checkpoint.
    pub fn model_hash(&self, n_roi: usize, n_classes: usize) -> u64 {
        let ident = format!(
            "{}|{n_roi}|{n_classes}",
            serde_json::to_string(&self.model).unwrap()
        );
        fnv1a64(ident.as_bytes())
    }
}

fn parse_override_value(raw: &str) -> serde_json::Value {
    if let Ok(b) = raw.parse::<bool>() {
        return serde_json::Value::Bool(b);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return serde_json::Value::Number(i.into());
    }
    if let Ok(f) = raw.parse::<f64>() {
        if let Some(num) = serde_json::Number::from_f64(f) {
            return serde_json::Value::Number(num);
        }
    }
    serde_json::Value::String(raw.to_string())
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_nested_float() {
        let mut cfg = TrainConfig::default();
        cfg.apply_override("losses.lambda1=0").unwrap();
        assert_eq!(cfg.losses.lambda1, 0.0);
    }

    #[test]
    fn override_enum_and_bool() {
        let mut cfg = TrainConfig::default();
        cfg.apply_override("model.dt_mode=fixed25").unwrap();
        assert_eq!(cfg.model.dt_mode, DtMode::Fixed25);
        cfg.apply_override("model.single_band=true").unwrap();
        assert!(cfg.model.single_band);
    }

    #[test]
    fn override_unknown_key_rejected() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.apply_override("nope.missing=1").is_err());
        assert!(cfg.apply_override("badformat").is_err());
    }

    #[test]
    fn resolved_json_round_trips() {
        let mut cfg = TrainConfig::default();
        cfg.apply_override("optim.lr=0.01").unwrap();
        let text = cfg.resolved_json();
        let re: TrainConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(re.optim.lr, 0.01);
    }

    #[test]
    fn model_hash_tracks_model_section() {
        let a = TrainConfig::default();
        let mut b = TrainConfig::default();
        assert_eq!(a.model_hash(16, 2), b.model_hash(16, 2));
        b.apply_override("model.attn_dim=8").unwrap();
        assert_ne!(a.model_hash(16, 2), b.model_hash(16, 2));
        assert_ne!(a.model_hash(16, 2), a.model_hash(8, 2));
    }
}
