//! JSON run configuration. Unknown keys are rejected at every level.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::OptimizerConfig;
use crate::error::{Error, Result};
use crate::loss::LambdaMode;
use crate::masking::{derive_mask_triple, MaskSpec};
use crate::model::{ModelConfig, Supervision};
use crate::probe::SvmOptions;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskingConfig {
    /// Explicit ratio list; when absent the triple is derived from the
    /// model's base mask.
    pub ratios: Option<Vec<f64>>,
    pub lambda_mode: LambdaMode,
    pub supervision: Supervision,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Record elapsed seconds in metrics. Off by default so repeated runs
    /// write identical files.
    pub wall_clock_metrics: bool,
    /// Probe each epoch's checkpoint and write the selection.
    pub probe_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            seed: 0,
            wall_clock_metrics: false,
            probe_each_epoch: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub head_hidden: usize,
    pub freeze_encoder: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            lr: 5e-4,
            weight_decay: 0.05,
            head_hidden: 128,
            freeze_encoder: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FewshotConfig {
    /// Full-batch head updates per trial.
    pub head_steps: usize,
    pub lr: f64,
    pub head_hidden: usize,
}

impl Default for FewshotConfig {
    fn default() -> Self {
        Self {
            head_steps: 200,
            lr: 1e-2,
            head_hidden: 64,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub masking: MaskingConfig,
    pub optimizer: OptimizerConfig,
    pub train: TrainConfig,
    pub probe: SvmOptions,
    pub finetune: FinetuneConfig,
    pub fewshot: FewshotConfig,
}

impl RunConfig {
    pub fn mask_spec(&self) -> Result<MaskSpec> {
        match &self.masking.ratios {
            Some(r) => MaskSpec::new(r.clone()),
            None => derive_mask_triple(self.model.base_mask),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.mask_spec()?;
        self.optimizer.validate()?;
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return Err(Error::param("epochs and batch_size must be positive"));
        }
        if !(self.probe.c > 0.0) || self.probe.max_epochs == 0 || !(self.probe.tol > 0.0) {
            return Err(Error::param("probe needs C > 0, max_epochs > 0, tol > 0"));
        }
        let ft = &self.finetune;
        if ft.epochs == 0 || ft.batch_size == 0 || !(ft.lr > 0.0) || ft.head_hidden == 0 {
            return Err(Error::param("invalid finetune settings"));
        }
        if self.fewshot.head_steps == 0 || !(self.fewshot.lr > 0.0) || self.fewshot.head_hidden == 0 {
            return Err(Error::param("invalid fewshot settings"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
        assert_eq!(c.mask_spec().unwrap().ratios(), &[0.6, 0.5, 0.4]);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"train": {"epochs": 2, "bogus": 1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"extra": 1}"#).is_err());
        let c = RunConfig::from_json(r#"{"train": {"epochs": 2}, "masking": {"lambda_mode": "uniform"}}"#).unwrap();
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.masking.lambda_mode, LambdaMode::Uniform);
    }

    #[test]
    fn explicit_ratios() {
        let c = RunConfig::from_json(r#"{"masking": {"ratios": [0.7, 0.6, 0.5, 0.4]}}"#).unwrap();
        assert_eq!(c.mask_spec().unwrap().len(), 4);
        assert!(RunConfig::from_json(r#"{"masking": {"ratios": [0.6, 0.7]}}"#).is_err());
    }
}
