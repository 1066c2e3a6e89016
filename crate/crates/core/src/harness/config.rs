//! The experiment record: every hyperparameter of a run, serialized into
//! each artifact together with its digest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::captioner::CaptionerConfig;
use crate::dataset::RESOLUTIONS;
use crate::error::{Error, Result};
use crate::metrics::ClassifierConfig;
use crate::stages::Arch;
use crate::textenc::TextEncConfig;
use diffcomp::AdamConfig;

/// Hex SHA-256 of the canonical JSON form.
pub fn digest<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: PathBuf,
    /// Stage-I output resolution R₁; stage k produces `R₁·2^(k−1)`.
    pub resolution: usize,
    /// Samples taken from the end of the dataset for evaluation.
    pub holdout: usize,
    pub data_seed: u64,
    pub init_seed: u64,
    pub train_seed: u64,
    pub stage: u8,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// λ, weight of the KL term.
    pub kl_weight: f64,
    /// λ_c, weight of the captioner term once warmup is over.
    pub captioner_weight: f64,
    pub warmup_epochs: usize,
    pub arch: Arch,
    /// Epochs between intermediate checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub clip_norm: Option<f64>,
    pub eval_samples: usize,
    pub eval_splits: usize,
    pub captioner: CaptionerConfig,
    pub textenc: TextEncConfig,
    pub classifier: ClassifierConfig,
    pub captioner_checkpoint: PathBuf,
    pub textenc_checkpoint: PathBuf,
    pub classifier_checkpoint: PathBuf,
    /// Checkpoints of stages 1..k−1 when training stage k.
    pub previous_stages: Vec<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            resolution: 16,
            holdout: 512,
            data_seed: 0,
            init_seed: 1,
            train_seed: 2,
            stage: 1,
            epochs: 30,
            batch_size: 32,
            lr_g: 2e-4,
            lr_d: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            kl_weight: 1.0,
            captioner_weight: 1.0,
            warmup_epochs: 5,
            arch: Arch::default(),
            checkpoint_every: 5,
            clip_norm: None,
            eval_samples: 512,
            eval_splits: 10,
            captioner: CaptionerConfig::default(),
            textenc: TextEncConfig::default(),
            classifier: ClassifierConfig::default(),
            captioner_checkpoint: PathBuf::from("captioner.pgan"),
            textenc_checkpoint: PathBuf::from("textenc.pgan"),
            classifier_checkpoint: PathBuf::from("classifier.pgan"),
            previous_stages: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(config)
    }

    pub fn digest(&self) -> Result<String> {
        digest(self)
    }

    pub fn stage_resolution(&self, stage: u8) -> usize {
        self.resolution << (stage.saturating_sub(1))
    }

    pub fn adam_g(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr_g,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn adam_d(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr_d,
            ..self.adam_g()
        }
    }

    /// Overrides one field, addressed by a dotted path such as
    /// `arch.c0`, with a JSON value (bare words are taken as strings).
    pub fn set(&mut self, path: &str, raw: &str) -> Result<()> {
        let value: serde_json::Value =
            serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(&*self)?;
        let mut slot = &mut doc;
        for key in path.split('.') {
            slot = slot
                .get_mut(key)
                .ok_or_else(|| Error::Config(format!("unknown field `{path}`")))?;
        }
        *slot = value;
        *self = serde_json::from_value(doc).map_err(|e| Error::Config(format!("{path}: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !RESOLUTIONS.contains(&self.resolution) {
            return fail(format!("resolution {} is not one of {RESOLUTIONS:?}", self.resolution));
        }
        if !(1..=3).contains(&self.stage) {
            return fail(format!("stage must be 1, 2 or 3, got {}", self.stage));
        }
        if self.epochs == 0 || self.batch_size < 2 {
            return fail("epochs must be positive and batch_size at least 2".into());
        }
        if self.stage == 1 && self.warmup_epochs >= self.epochs {
            return fail(format!(
                "warmup_epochs ({}) must be below epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        let nonneg = [
            ("lr_g", self.lr_g),
            ("lr_d", self.lr_d),
            ("kl_weight", self.kl_weight),
            ("captioner_weight", self.captioner_weight),
            ("adam_eps", self.adam_eps),
        ];
        if let Some((name, v)) = nonneg.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return fail(format!("{name} must be finite and non-negative, got {v}"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("moment decay coefficients must lie in [0, 1)".into());
        }
        let a = &self.arch;
        let dims = [
            ("ng", a.ng),
            ("dt", a.dt),
            ("c0", a.c0),
            ("cd", a.cd),
            ("ce", a.ce),
            ("nd", a.nd),
            ("mg", a.mg),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return fail(format!("arch.{name} must be positive"));
        }
        if self.eval_splits == 0 {
            return fail("eval_splits must be positive".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return fail(format!("clip_norm must be positive, got {c}"));
            }
        }
        Ok(())
    }
}
