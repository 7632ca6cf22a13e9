//! The run configuration: one TOML file with `[data]`, `[model]`, `[train]`,
//! `[popusense]` and `[eval]` sections. Unknown keys are errors.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::pdc::ModelConfig;
use crate::popusense::{BankPolicy, PopuSenseConfig};
use crate::synthdata::DatasetSpec;
use crate::train::{Configuration, LossKind, TrainConfig};

pub const SEED_OVERRIDE_VAR: &str = "POPUSENSE_SEED_OVERRIDE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub latent_channels: usize,
    pub base_width: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self { latent_channels: m.latent_channels, base_width: m.base_width }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub configuration: Configuration,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub loss: LossKind,
    pub seed: u64,
    pub freeze_refiner_output: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            configuration: Configuration::Pdccore,
            epochs: 30,
            batch_size: 16,
            learning_rate: 5e-3,
            loss: LossKind::L2,
            seed: 1,
            freeze_refiner_output: false,
        }
    }
}

/// `k` defaults per variant (8 narrow, 10 wide) when omitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PopuSenseSection {
    pub k: Option<usize>,
    pub layers: usize,
    pub bank_capacity: usize,
    pub bank_policy: BankPolicy,
}

impl Default for PopuSenseSection {
    fn default() -> Self {
        Self { k: None, layers: 2, bank_capacity: 256, bank_policy: BankPolicy::Fifo }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub smoothing_sigma: f64,
    pub top_q: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { smoothing_sigma: 2.0, top_q: 0.02 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DatasetSpec,
    pub model: ModelSection,
    pub train: TrainSection,
    pub popusense: PopuSenseSection,
    pub eval: EvalOptions,
}

impl RunConfig {
    /// Parses, fills variant-dependent defaults and validates.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Parses the JSON form stored in checkpoints.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fills `popusense.k` from the configured variant when it was omitted.
    pub fn resolve(&mut self) {
        if self.popusense.k.is_none() {
            if let Some(v) = self.train.configuration.variant() {
                self.popusense.k = Some(v.default_k());
            }
        }
    }

    /// Applies `POPUSENSE_SEED_OVERRIDE` when set.
    pub fn apply_env_override(&mut self) -> Result<()> {
        match std::env::var(SEED_OVERRIDE_VAR) {
            Ok(v) => {
                self.train.seed = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{SEED_OVERRIDE_VAR} = {v:?} is not an unsigned integer")))?;
                Ok(())
            }
            Err(std::env::VarError::NotPresent) => Ok(()),
            Err(e) => Err(Error::Config(format!("{SEED_OVERRIDE_VAR}: {e}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let spec = &self.data;
        if spec.size < crate::synthdata::MIN_SIZE || !spec.size.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "data.size = {} must be a multiple of 8 and at least {}",
                spec.size,
                crate::synthdata::MIN_SIZE
            )));
        }
        self.model_config().validate()?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(t.learning_rate.is_finite() && t.learning_rate >= 0.0) {
            return Err(Error::Config("train.learning_rate must be finite and non-negative".into()));
        }
        let e = &self.eval;
        if !(e.smoothing_sigma.is_finite() && e.smoothing_sigma >= 0.0) {
            return Err(Error::Config("eval.smoothing_sigma must be finite and non-negative".into()));
        }
        if !(e.top_q > 0.0 && e.top_q <= 1.0) {
            return Err(Error::Config("eval.top_q must lie in (0, 1]".into()));
        }
        self.train_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            image_size: self.data.size,
            latent_channels: self.model.latent_channels,
            base_width: self.model.base_width,
        }
    }

    pub fn popusense_config(&self) -> Option<PopuSenseConfig> {
        let variant = self.train.configuration.variant()?;
        Some(PopuSenseConfig {
            variant,
            k: self.popusense.k.unwrap_or(variant.default_k()),
            layers: self.popusense.layers,
            bank_capacity: self.popusense.bank_capacity,
            bank_policy: self.popusense.bank_policy,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            configuration: t.configuration,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            loss: t.loss,
            seed: t.seed,
            popusense: self.popusense_config(),
            freeze_refiner_output: t.freeze_refiner_output,
        }
    }

    /// Compact JSON with fields in declaration order.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of [`canonical_json`](Self::canonical_json).
    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Commented TOML listing every key with its default.
    pub fn default_toml() -> String {
        let mut cfg = RunConfig::default();
        cfg.popusense.k = None;
        let body = toml::to_string(&cfg).expect("config serializes");
        format!(
            "# popusense run configuration; every key is optional.\n\
             # train.configuration: pdccore | narrow_popusense | wide_popusense\n\
             # popusense.k defaults to 8 (narrow) or 10 (wide).\n\n{body}"
        )
    }
}
