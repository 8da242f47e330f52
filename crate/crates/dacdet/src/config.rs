//! Experiment configuration: one TOML file with `[data]`, `[model]` and
//! `[train]` tables. Every field has a default, so an empty file is valid.

use std::path::Path;

use dacdet_core::augment::AugConfig;
use dacdet_core::evalmap::EvalConfig;
use dacdet_core::losses::DacConfig;
use dacdet_core::model::ModelConfig;
use dacdet_core::optim::OptimizerKind;
use dacdet_core::synth::GenConfig;
use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: GenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Pairs per step; also the number of contrastive pairs `N`.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Initialisation, shuffling and augmentation all derive from this.
    pub seed: u64,
    /// Evaluate on the test split every this many epochs (0: only at the end).
    pub eval_every: usize,
    /// Cap on optimizer steps, for smoke runs (0: no cap).
    pub max_steps: usize,
    pub nms_iou: f64,
    pub dac: DacConfig,
    pub aug: AugConfig,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 1,
            eval_every: 5,
            max_steps: 0,
            nms_iou: 0.45,
            dac: DacConfig::default(),
            aug: AugConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Confidence floor used when decoding for AP, so the whole ranking is
/// scored; `eval.conf_thresh` only sets the precision/recall operating point.
pub const DECODE_FLOOR: f64 = 1e-3;

impl TrainConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let bad = |m: String| Err(Error::Config(m));
        self.dac.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.aug.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.dac.lambda_dac > 0.0 && self.batch_size < 2 {
            return bad(format!(
                "batch_size {} is too small: the contrastive term needs at least 2 pairs per batch",
                self.batch_size
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return bad(format!("nms_iou must lie in [0, 1], got {}", self.nms_iou));
        }
        if !(0.0..=1.0).contains(&self.eval.conf_thresh) || !(0.0..=1.0).contains(&self.eval.iou_thresh) {
            return bad("eval thresholds must lie in [0, 1]".into());
        }
        Ok(())
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), Error> {
        self.data.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.data.image_size % self.model.stride() != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not a multiple of the backbone stride {}",
                self.data.image_size,
                self.model.stride()
            )));
        }
        self.train.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self, Error> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }
}
