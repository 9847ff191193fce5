//! Run configuration, read from a JSON file by the CLI.

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Update/fusion/control gates over the current vector and the history.
    Gated,
    /// `tanh(W_f [v; h])` with no gating.
    Concat,
    /// Not implemented; selecting it fails with [`Error::Unsupported`].
    GruLike,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryMode {
    /// The history becomes the fused vector of the selected option.
    Flow,
    /// The history becomes the raw encoding of the selected option only.
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup: f64,
    /// Mentions (local) or texts (global) per optimizer step.
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct M3Config {
    #[serde(rename = "K")]
    pub k: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta: f64,
    pub nil_threshold: f64,
    pub seed: u64,
    pub encoder: EncoderConfig,
    /// Both verifier stages: the NIL option and the query-only judgement.
    pub verifier: bool,
    pub no_rerank: bool,
    pub no_query_update: bool,
    pub gate_mode: GateMode,
    pub history_mode: HistoryMode,
    pub max_len_local: usize,
    pub max_len_global: usize,
    pub lr_local: f64,
    pub lr_global: f64,
    pub local: TrainConfig,
    pub global: TrainConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            warmup: 0.1,
            batch_size: 8,
        }
    }
}

impl Default for M3Config {
    fn default() -> Self {
        Self {
            k: 5,
            alpha1: 0.75,
            alpha2: 0.25,
            beta: 0.5,
            nil_threshold: 0.5,
            seed: 0,
            encoder: EncoderConfig::default(),
            verifier: true,
            no_rerank: false,
            no_query_update: false,
            gate_mode: GateMode::Gated,
            history_mode: HistoryMode::Flow,
            max_len_local: 256,
            max_len_global: 512,
            lr_local: 5e-6,
            lr_global: 1e-5,
            local: TrainConfig::default(),
            global: TrainConfig::default(),
        }
    }
}

impl M3Config {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.k == 0 {
            return bad("K must be at least 1");
        }
        if self.alpha1 < 0.0 || self.alpha2 < 0.0 || self.alpha1 + self.alpha2 <= 0.0 {
            return bad("alpha1 and alpha2 must be non-negative with a positive sum");
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad("beta must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.nil_threshold) {
            return bad("nil_threshold must lie in [0, 1]");
        }
        if self.max_len_local < 8 || self.max_len_global < 8 {
            return bad("maximum sequence lengths must be at least 8");
        }
        for t in [&self.local, &self.global] {
            if t.batch_size == 0 || !(0.0..=1.0).contains(&t.warmup) {
                return bad("training batch_size must be positive and warmup in [0, 1]");
            }
        }
        if self.lr_local < 0.0 || self.lr_global < 0.0 {
            return bad("learning rates must be non-negative");
        }
        if self.gate_mode == GateMode::GruLike {
            return Err(Error::Unsupported("gate_mode gru_like".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| Error::InvalidConfig(format!("config: {e}")))?;
        Ok(cfg)
    }
}
