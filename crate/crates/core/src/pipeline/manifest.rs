//! Run directory layout and the immutable run manifest.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use super::optim::OptimizerConfig;
use crate::error::{Error, Result};
use crate::geometry::DataSplits;
use crate::loss::{loss_weights_with, LambdaMode};
use crate::model::Supervision;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const PRETRAIN_METRICS_FILE: &str = "pretrain_metrics.csv";
pub const PROBE_METRICS_FILE: &str = "probe_metrics.csv";
pub const SELECTION_FILE: &str = "selection.json";
pub const FINETUNE_METRICS_FILE: &str = "finetune_metrics.csv";
pub const FEWSHOT_FILE: &str = "fewshot.json";

/// How branch partitions are drawn; recorded so runs are self-describing.
pub const MASK_PARTITION: &str = "independent per branch per sample";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetFingerprint {
    /// SHA-256 over the train file bytes followed by the val file bytes.
    pub sha256: String,
    pub train_records: usize,
    pub val_records: usize,
    pub points_per_cloud: usize,
}

impl DatasetFingerprint {
    pub fn of(splits: &DataSplits) -> Result<Self> {
        let mut h = Sha256::new();
        h.update(splits.train.to_bytes()?);
        h.update(splits.val.to_bytes()?);
        Ok(Self {
            sha256: hex::encode(h.finalize()),
            train_records: splits.train.len(),
            val_records: splits.val.len(),
            points_per_cloud: splits.train.points_per_cloud,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunPaths {
    pub checkpoints: String,
    pub pretrain_metrics: String,
    pub probe_metrics: String,
    pub selection: String,
}

impl Default for RunPaths {
    fn default() -> Self {
        Self {
            checkpoints: CHECKPOINT_DIR.into(),
            pretrain_metrics: PRETRAIN_METRICS_FILE.into(),
            probe_metrics: PROBE_METRICS_FILE.into(),
            selection: SELECTION_FILE.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub config: RunConfig,
    pub seed: u64,
    pub mask_ratios: Vec<f64>,
    pub lambda_mode: LambdaMode,
    pub lambdas: Vec<f64>,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub supervision: Supervision,
    pub mask_partition: String,
    pub dataset: DatasetFingerprint,
    pub paths: RunPaths,
}

impl RunManifest {
    pub fn new(config: &RunConfig, splits: &DataSplits) -> Result<Self> {
        config.validate()?;
        if splits.train.points_per_cloud != config.model.n_points {
            return Err(Error::param(format!(
                "dataset has {} points per cloud, model expects {}",
                splits.train.points_per_cloud, config.model.n_points
            )));
        }
        let spec = config.mask_spec()?;
        Ok(Self {
            config: config.clone(),
            seed: config.train.seed,
            mask_ratios: spec.ratios().to_vec(),
            lambda_mode: config.masking.lambda_mode,
            lambdas: loss_weights_with(&spec, config.masking.lambda_mode).lambdas,
            epochs: config.train.epochs,
            optimizer: config.optimizer.clone(),
            supervision: config.masking.supervision,
            mask_partition: MASK_PARTITION.into(),
            dataset: DatasetFingerprint::of(splits)?,
            paths: RunPaths::default(),
        })
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// An output directory owned by one pre-training run.
#[derive(Clone, Debug)]
pub struct Run {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub manifest_sha256: String,
}

impl Run {
    /// Create the directory and write the manifest. An existing manifest is
    /// never overwritten.
    pub fn create(dir: &Path, manifest: RunManifest) -> Result<Self> {
        fs::create_dir_all(dir.join(&manifest.paths.checkpoints))?;
        let text = serde_json::to_string_pretty(&manifest)?;
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(dir.join(MANIFEST_FILE))
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => {
                    Error::param(format!("{} already holds a run", dir.display()))
                }
                _ => e.into(),
            })?;
        f.write_all(text.as_bytes())?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest_sha256: sha256_hex(text.as_bytes()),
            manifest,
        })
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let text = fs::read(dir.join(MANIFEST_FILE))?;
        let manifest: RunManifest = serde_json::from_slice(&text)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest_sha256: sha256_hex(&text),
            manifest,
        })
    }

    pub fn checkpoint_path(&self, epoch: usize) -> PathBuf {
        self.dir
            .join(&self.manifest.paths.checkpoints)
            .join(format!("epoch_{epoch:04}.tpmc"))
    }

    pub fn pretrain_metrics_path(&self) -> PathBuf {
        self.dir.join(&self.manifest.paths.pretrain_metrics)
    }

    pub fn probe_metrics_path(&self) -> PathBuf {
        self.dir.join(&self.manifest.paths.probe_metrics)
    }

    pub fn selection_path(&self) -> PathBuf {
        self.dir.join(&self.manifest.paths.selection)
    }

    /// Epochs with a checkpoint on disk, ascending.
    pub fn checkpoint_epochs(&self) -> Result<Vec<usize>> {
        let mut epochs = Vec::new();
        for entry in fs::read_dir(self.dir.join(&self.manifest.paths.checkpoints))? {
            let name = entry?.file_name();
            let name = name.to_string_lossy();
            if let Some(e) = name
                .strip_prefix("epoch_")
                .and_then(|s| s.strip_suffix(".tpmc"))
                .and_then(|s| s.parse().ok())
            {
                epochs.push(e);
            }
        }
        epochs.sort_unstable();
        Ok(epochs)
    }
}
