//! Flat run configuration shared by training, evaluation, and the CLI.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Every tunable of a run. Serialized as flat TOML; unknown keys are
/// rejected and missing keys take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Shared feature width `H`.
    pub hidden: usize,
    /// Projection width `d` of the relevance attention.
    pub relevance_dim: usize,
    /// Viewpoint frames `K`.
    pub k: usize,
    /// Frames per pooled segment `S_n`.
    pub segment_size: usize,
    /// Feed video features through the enhancer when a sample has them.
    pub use_video: bool,
    /// Longest decoder input (BOS plus answer tokens).
    pub max_tokens: usize,
    pub max_prefix: usize,
    /// Greedy decoding stops after this many tokens.
    pub max_answer_len: usize,

    pub stage1_lr: f64,
    pub stage1_epochs: usize,
    pub stage2_lr: f64,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,

    pub lora_enabled: bool,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            hidden: 64,
            relevance_dim: 64,
            k: 4,
            segment_size: 8,
            use_video: true,
            max_tokens: 12,
            max_prefix: 64,
            max_answer_len: 10,
            stage1_lr: 2e-3,
            stage1_epochs: 10,
            stage2_lr: 4e-4,
            stage2_epochs: 5,
            batch_size: 1,
            warmup_fraction: 0.03,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
            lora_enabled: true,
            lora_rank: 8,
            lora_alpha: 8.0,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `text` and then applies `key=value` overrides; values are read
    /// as TOML literals, falling back to plain strings.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let key = key.trim();
            let raw = raw.trim();
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            table.insert(key.to_string(), value);
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Keys that fix parameter shapes; a checkpoint only accepts configs
    /// that agree on them.
    pub fn architecture_mismatch(&self, other: &RunConfig) -> Option<&'static str> {
        let checks = [
            ("hidden", self.hidden == other.hidden),
            ("relevance_dim", self.relevance_dim == other.relevance_dim),
            ("max_tokens", self.max_tokens == other.max_tokens),
            ("max_prefix", self.max_prefix == other.max_prefix),
            ("lora_rank", self.lora_rank == other.lora_rank),
            ("lora_alpha", self.lora_alpha == other.lora_alpha),
        ];
        checks.into_iter().find(|(_, ok)| !ok).map(|(k, _)| k)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.hidden == 0 || self.relevance_dim == 0 {
            return fail("hidden and relevance_dim must be at least 1".into());
        }
        if self.k == 0 || self.segment_size == 0 {
            return fail("k and segment_size must be at least 1".into());
        }
        if self.max_tokens < 2 || self.max_prefix == 0 || self.max_answer_len == 0 {
            return fail("max_tokens must be at least 2; max_prefix and max_answer_len at least 1".into());
        }
        for (name, lr) in [("stage1_lr", self.stage1_lr), ("stage2_lr", self.stage2_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return fail(format!("{name} must be positive, got {lr}"));
            }
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return fail(format!(
                "warmup_fraction must lie in (0, 1), got {}",
                self.warmup_fraction
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !positive(self.eps) {
            return fail("Adam needs 0 <= beta < 1 and eps > 0".into());
        }
        if !positive(self.grad_clip) {
            return fail("grad_clip must be positive".into());
        }
        if self.lora_enabled && (self.lora_rank == 0 || !positive(self.lora_alpha)) {
            return fail("lora_rank must be at least 1 and lora_alpha positive".into());
        }
        Ok(())
    }
}

/// False for NaN as well as non-positive values.
fn positive(x: f64) -> bool {
    x.is_finite() && x > 0.0
}
