//! Linear-SVM probing of encoder features and SVM-guided checkpoint
//! selection.

mod selection;
mod svm;

pub use selection::{per_mask_best, select_weights, select_with_rule, MaskBest, ProbeRow, SelectionResult, SelectionRule};
pub use svm::{
    evaluate_svm, probe_accuracy, train_binary_svm, train_linear_svm, BinarySvm, ProbeDataset, Standardizer,
    SvmModel, SvmOptions,
};

use crate::error::Result;
use crate::geometry::{DataSplits, PointCloud};
use crate::model::{global_feature, ModelConfig, ModelParams};
use crate::rng::{derive_seed, stream};

/// Global features for `clouds`; cloud `i` uses its own derived seed, so a
/// given cloud sees the same patches and mask at every call.
pub fn extract_features(
    params: &ModelParams,
    cfg: &ModelConfig,
    clouds: &[PointCloud],
    mask_ratio: Option<f64>,
    seed: u64,
) -> Result<Vec<Vec<f32>>> {
    clouds
        .iter()
        .enumerate()
        .map(|(i, c)| Ok(global_feature(c, params, cfg, mask_ratio, derive_seed(seed, &[i as u64]))?.0))
        .collect()
}

/// Features of both splits, ready for the SVM.
pub fn probe_dataset(
    params: &ModelParams,
    cfg: &ModelConfig,
    splits: &DataSplits,
    mask_ratio: Option<f64>,
    seed: u64,
) -> Result<ProbeDataset> {
    let base = derive_seed(seed, &[stream::FEATURE]);
    let train = extract_features(params, cfg, &splits.train.clouds, mask_ratio, derive_seed(base, &[0]))?;
    let val = extract_features(params, cfg, &splits.val.clouds, mask_ratio, derive_seed(base, &[1]))?;
    ProbeDataset::new(&train, splits.train.labels(), &val, splits.val.labels())
}

/// Val accuracy of a linear SVM on features of `params` under `mask_ratio`.
pub fn probe_params(
    params: &ModelParams,
    cfg: &ModelConfig,
    splits: &DataSplits,
    mask_ratio: Option<f64>,
    opts: &SvmOptions,
    seed: u64,
) -> Result<f64> {
    let data = probe_dataset(params, cfg, splits, mask_ratio, seed)?;
    probe_accuracy(&data, opts, derive_seed(seed, &[stream::SVM]))
}
