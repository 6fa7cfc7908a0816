//! Training loops, persistence, metrics, and the ablation harness.

mod ablation;
mod checkpoint;
mod config;
mod fewshot;
mod finetune;
mod manifest;
mod metrics;
mod optim;
mod pretrain;

pub use ablation::{ablate, AblationPlan, AblationRow, ABLATION_FILE};
pub use fewshot::{fewshot_eval, fewshot_run, FewshotProtocol, FewshotResult};
pub use finetune::{
    encoder_params, finetune_classification, finetune_from_epoch, finetune_run, head_shapes, init_head,
    write_finetune_metrics, FinetuneEpoch, FinetuneReport,
};

pub use checkpoint::{CheckpointHeader, CheckpointRecord, OptimizerState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{FewshotConfig, FinetuneConfig, MaskingConfig, RunConfig, TrainConfig};
pub use manifest::{
    DatasetFingerprint, Run, RunManifest, RunPaths, CHECKPOINT_DIR, FEWSHOT_FILE, FINETUNE_METRICS_FILE,
    MANIFEST_FILE, MASK_PARTITION, PRETRAIN_METRICS_FILE, PROBE_METRICS_FILE, SELECTION_FILE,
};
pub use metrics::{
    pretrain_header, read_csv, read_json, read_pretrain_metrics, read_probe_metrics, read_selection, write_csv,
    write_json, write_pretrain_metrics, write_probe_metrics, write_selection, EpochMetrics,
};
pub use optim::{decays, AdamW, OptimizerConfig, Schedule};
pub use pretrain::{load_run_checkpoint, pretrain, probe_epoch, probe_run, sample_step, select_run, PretrainOutcome, SampleStep};
