//! Run configuration.
//!
//! A run is described by one flat set of keys. Config files are TOML with
//! `key = value` lines only; unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{CandidateSetting, DatasetOptions, Format, DEFAULT_CANDIDATES};
use crate::diagnostics::{DEFAULT_BINS, DEFAULT_SNAPSHOT_SIZE};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::loss::{Augmentation, LossConfig};
use crate::optim::AdamConfig;
use crate::threshold::{check_q, Strategy, DEFAULT_HIDDEN, DEFAULT_Q};

pub const DEFAULT_G_LEARNING_RATE: f64 = 0.03;
pub const DEFAULT_G_EPS: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // Data.
    pub data: Option<String>,
    pub format: Format,
    pub max_len: usize,
    pub min_seq_len: usize,
    pub min_item_interactions: usize,

    // Encoder.
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,

    // Optimization.
    pub seed: u64,
    pub epochs: usize,
    /// Stop after this many optimizer steps; 0 means no limit.
    pub max_steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate of the threshold network.
    pub g_learning_rate: f64,
    /// Adam epsilon of the threshold network. Larger than `eps` so that
    /// near-zero hidden-layer gradients do not get rescaled into full steps.
    pub g_eps: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,

    // Thresholds.
    pub strategy: Strategy,
    pub k0: f64,
    pub q: f64,
    pub g_hidden: usize,

    // Loss.
    pub lambda: f64,
    pub lambda_cl: f64,
    pub tau: f64,
    pub positive_sampling: bool,
    pub aug: Augmentation,
    pub st_gain: f64,

    // Evaluation and diagnostics.
    pub eval_every: usize,
    /// Epochs without a validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub eval_setting: CandidateSetting,
    pub eval_candidates: usize,
    pub exclude_seen: bool,
    pub snapshot_size: usize,
    pub hist_bins: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let loss = LossConfig::default();
        let adam = AdamConfig::default();
        let ds = DatasetOptions::default();
        Self {
            data: None,
            format: Format::Ml1m,
            max_len: ds.max_len,
            min_seq_len: ds.min_seq_len,
            min_item_interactions: ds.min_item_interactions,
            dim: 64,
            layers: 2,
            heads: 2,
            dropout: 0.1,
            seed: 42,
            epochs: 50,
            max_steps: 0,
            batch_size: 256,
            learning_rate: adam.lr,
            g_learning_rate: DEFAULT_G_LEARNING_RATE,
            g_eps: DEFAULT_G_EPS,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            strategy: Strategy::Learnable,
            k0: 1.0,
            q: DEFAULT_Q,
            g_hidden: DEFAULT_HIDDEN,
            lambda: loss.lambda,
            lambda_cl: loss.lambda_cl,
            tau: loss.tau,
            positive_sampling: loss.positive_sampling,
            aug: loss.augmentation,
            st_gain: loss.st_gain,
            eval_every: 1,
            patience: 10,
            eval_setting: CandidateSetting::Whole,
            eval_candidates: DEFAULT_CANDIDATES,
            exclude_seen: true,
            snapshot_size: DEFAULT_SNAPSHOT_SIZE,
            hist_bins: DEFAULT_BINS,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a TOML file, or the `config` object of a `manifest.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            let v: serde_json::Value = serde_json::from_str(&text)?;
            let cfg = v.get("config").cloned().unwrap_or(v);
            return serde_json::from_value(cfg).map_err(|e| Error::Config(e.to_string()));
        }
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs < 1 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.learning_rate > 0.0) || !(self.g_learning_rate > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0)
            || !(self.g_eps > 0.0)
        {
            return bad("invalid optimizer moments".into());
        }
        if !(-1.0..=1.0).contains(&self.k0) {
            return bad(format!("k0 must lie in [-1, 1], got {}", self.k0));
        }
        check_q(self.q).map_err(|e| Error::Config(e.to_string()))?;
        if self.g_hidden == 0 || self.eval_every == 0 || self.eval_candidates == 0 {
            return bad("g_hidden, eval_every and eval_candidates must be positive".into());
        }
        if self.snapshot_size < 2 || self.hist_bins < 2 {
            return bad("snapshot_size and hist_bins must be at least 2".into());
        }
        self.loss().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.encoder(2).validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn dataset_options(&self) -> DatasetOptions {
        DatasetOptions {
            min_seq_len: self.min_seq_len,
            max_len: self.max_len,
            min_item_interactions: self.min_item_interactions,
        }
    }

    pub fn encoder(&self, num_items: usize) -> EncoderConfig {
        EncoderConfig {
            dim: self.dim,
            layers: self.layers,
            heads: self.heads,
            dropout: self.dropout,
            max_len: self.max_len,
            vocab_size: num_items + 1,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            lambda_cl: self.lambda_cl,
            tau: self.tau,
            positive_sampling: self.positive_sampling,
            augmentation: self.aug,
            st_gain: self.st_gain,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn g_adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.g_learning_rate,
            eps: self.g_eps,
            ..self.adam()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let text = c.to_toml();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn flat_keys_override_defaults() {
        let c = RunConfig::from_toml(
            "epochs = 3\nstrategy = \"fixed\"\nk0 = 0.2\naug = \"us_x\"\npositive_sampling = false\nformat = \"tsv\"\n",
        )
        .unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.strategy, Strategy::Fixed);
        assert_eq!(c.aug, Augmentation::UsX);
        assert_eq!(c.format, Format::Tsv);
        assert!(!c.positive_sampling);
        assert_eq!(c.dim, 64);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(RunConfig::from_toml("epoch = 3\n").is_err());
        let c = RunConfig::from_toml("k0 = 2.0\n").unwrap();
        assert!(c.validate().is_err());
        let c = RunConfig::from_toml("heads = 3\n").unwrap();
        assert!(c.validate().is_err());
        let c = RunConfig::from_toml("batch_size = 1\n").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn loads_manifest_config() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = RunConfig::default();
        c.epochs = 7;
        let path = dir.path().join("manifest.json");
        fs::write(&path, serde_json::json!({ "config": c, "seeds": {} }).to_string()).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap(), c);
    }
}
