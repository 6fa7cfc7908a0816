//! Classification fine-tuning: pretrained encoder plus a two-layer head.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::FinetuneConfig;
use super::manifest::{Run, FINETUNE_METRICS_FILE};
use super::metrics::{read_selection, write_csv};
use super::optim::{AdamW, OptimizerConfig, Schedule};
use super::pretrain::load_run_checkpoint;
use crate::autodiff::{Graph, NodeId, ParamHandles, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{DataSplits, PointCloud};
use crate::model::{feature_inputs, feature_node, is_encoder_param, param_shapes, ModelConfig, ModelParams};
use crate::probe::{extract_features, SelectionRule};
use crate::rng::{derive_seed, rng_for, stream};

pub const HEAD_PREFIX: &str = "head.";

/// Shapes of the classification head on top of a `feature_dim` feature.
pub fn head_shapes(feature_dim: usize, hidden: usize, classes: usize) -> Vec<(String, Vec<usize>)> {
    vec![
        ("head.fc1.w".into(), vec![feature_dim, hidden]),
        ("head.fc1.b".into(), vec![hidden]),
        ("head.fc2.w".into(), vec![hidden, classes]),
        ("head.fc2.b".into(), vec![classes]),
    ]
}

pub fn init_head(feature_dim: usize, hidden: usize, classes: usize, seed: u64) -> Result<ParamStore<f32>> {
    let mut store = ParamStore::new();
    for (i, (name, shape)) in head_shapes(feature_dim, hidden, classes).into_iter().enumerate() {
        let t = crate::model::init::init_tensor(&name, &shape, seed, i as u64)?;
        store.insert(name, t)?;
    }
    Ok(store)
}

/// Logits `B x classes` for stacked features `B x feature_dim`.
pub fn head_logits(g: &mut Graph<f32>, h: &ParamHandles, features: NodeId) -> Result<NodeId> {
    let y = g.matmul(features, h.get("head.fc1.w")?)?;
    let y = g.add(y, h.get("head.fc1.b")?)?;
    let y = g.gelu(y)?;
    let y = g.matmul(y, h.get("head.fc2.w")?)?;
    g.add(y, h.get("head.fc2.b")?)
}

/// Argmax per row; ties go to the lowest class.
pub fn argmax_rows(logits: &Tensor<f32>) -> Vec<u32> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best as u32
        })
        .collect()
}

/// Encoder tensors from a full model, checked against `cfg`.
pub fn encoder_params(cfg: &ModelConfig, params: &ModelParams) -> Result<ModelParams> {
    for (name, shape) in param_shapes(cfg).into_iter().filter(|(n, _)| is_encoder_param(n)) {
        match params.get(&name) {
            Some(t) if t.shape() == shape.as_slice() => {}
            Some(t) => {
                return Err(Error::Compatibility(format!(
                    "tensor `{name}` has shape {:?}, config expects {shape:?}",
                    t.shape()
                )))
            }
            None => return Err(Error::Compatibility(format!("missing tensor `{name}`"))),
        }
    }
    Ok(params.filtered(is_encoder_param))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneReport {
    pub epochs: Vec<FinetuneEpoch>,
    pub final_val_accuracy: f64,
    pub num_classes: usize,
    pub trainable_parameters: usize,
    pub params: ParamStore<f32>,
}

fn stack(g: &mut Graph<f32>, rows: &[Vec<f32>]) -> Result<NodeId> {
    let dim = rows[0].len();
    let data = rows.iter().flatten().copied().collect();
    g.input(Tensor::new(vec![rows.len(), dim], data)?)
}

fn labels_of(clouds: &[PointCloud]) -> Vec<usize> {
    clouds.iter().map(|c| c.label.unwrap_or(0) as usize).collect()
}

fn accuracy(pred: &[u32], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(p, l)| **p as usize == **l).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Fine-tune `encoder` plus a fresh head on the train split; report val
/// accuracy after every epoch. Encoder inputs are unmasked clouds.
pub fn finetune_classification(
    model: &ModelConfig,
    encoder: &ModelParams,
    splits: &DataSplits,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneReport> {
    let encoder = encoder_params(model, encoder)?;
    let classes = splits.train.num_classes().max(splits.val.num_classes());
    if classes < 2 {
        return Err(Error::param("fine-tuning needs at least two classes"));
    }
    let seed = derive_seed(seed, &[stream::FINETUNE]);
    let head = init_head(model.feature_dim(), cfg.head_hidden, classes, seed)?;
    let mut params = encoder.clone();
    for (n, t) in head.iter() {
        params.insert(n.clone(), t.clone())?;
    }
    let trainable = |name: &str| name.starts_with(HEAD_PREFIX) || !cfg.freeze_encoder;
    let trainable_parameters = params.iter().filter(|(n, _)| trainable(n)).map(|(_, t)| t.numel()).sum();

    let opt_cfg = OptimizerConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..OptimizerConfig::default()
    };
    let mut opt = AdamW::new(opt_cfg.clone(), &params);
    let n = splits.train.len();
    let schedule = Schedule::new(&opt_cfg, cfg.epochs * n.div_ceil(cfg.batch_size));
    let train_labels = labels_of(&splits.train.clouds);
    let val_labels = labels_of(&splits.val.clouds);

    let val_seed = derive_seed(seed, &[1]);
    // A frozen encoder sees fixed inputs, so its features are computed once.
    let frozen_train = if cfg.freeze_encoder {
        Some(extract_features(&encoder, model, &splits.train.clouds, None, derive_seed(seed, &[0]))?)
    } else {
        None
    };
    let val_features = |params: &ParamStore<f32>| -> Result<Vec<Vec<f32>>> {
        extract_features(&params.filtered(is_encoder_param), model, &splits.val.clouds, None, val_seed)
    };
    let frozen_val = if cfg.freeze_encoder {
        Some(val_features(&params)?)
    } else {
        None
    };

    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::new();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng_for(seed, &[2, epoch as u64]));
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut g = Graph::<f32>::new();
            let h = params.attach_with(&mut g, trainable)?;
            let feats = match &frozen_train {
                Some(f) => {
                    let rows: Vec<Vec<f32>> = chunk.iter().map(|&i| f[i].clone()).collect();
                    stack(&mut g, &rows)?
                }
                None => {
                    let mut nodes = Vec::with_capacity(chunk.len());
                    for &i in chunk {
                        let s = derive_seed(seed, &[3, epoch as u64, i as u64]);
                        let (patches, assignment) = feature_inputs(model, &splits.train.clouds[i], None, s)?;
                        let f = feature_node(&mut g, &h, model, &patches, &assignment)?;
                        nodes.push(g.reshape(f, &[1, model.feature_dim()])?);
                    }
                    g.concat(&nodes, 0)?
                }
            };
            let logits = head_logits(&mut g, &h, feats)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train_labels[i]).collect();
            let loss = g.cross_entropy(logits, &labels).map_err(|e| Error::Diverged {
                epoch,
                batch: b,
                reason: e.to_string(),
            })?;
            loss_sum += g.value(loss).item() as f64 * chunk.len() as f64;
            let grads = g.backward(loss)?;
            opt.update(&mut params, &grads, schedule.at(step))?;
            step += 1;
        }
        let vf = match &frozen_val {
            Some(v) => v.clone(),
            None => val_features(&params)?,
        };
        let mut g = Graph::<f32>::new();
        let h = params.attach_frozen(&mut g)?;
        let feats = stack(&mut g, &vf)?;
        let logits = head_logits(&mut g, &h, feats)?;
        let val_accuracy = accuracy(&argmax_rows(g.value(logits)), &val_labels);
        log::info!("finetune epoch {epoch}: loss {:.4}, val acc {val_accuracy:.4}", loss_sum / n as f64);
        history.push(FinetuneEpoch {
            epoch,
            train_loss: loss_sum / n as f64,
            val_accuracy,
        });
    }
    Ok(FinetuneReport {
        final_val_accuracy: history.last().map_or(0.0, |e| e.val_accuracy),
        epochs: history,
        num_classes: classes,
        trainable_parameters,
        params,
    })
}

/// Fine-tune from the checkpoint chosen by `rule` (read from the run's
/// `selection.json`) and write `finetune_metrics.csv`.
pub fn finetune_run(run: &Run, splits: &DataSplits, cfg: &FinetuneConfig, rule: SelectionRule) -> Result<FinetuneReport> {
    let selection = read_selection(&run.selection_path())?;
    let best = selection
        .best_for(rule.0)
        .ok_or_else(|| Error::param(format!("selection has no entry for rule {rule}")))?;
    let report = finetune_from_epoch(run, splits, cfg, best.epoch)?;
    write_csv(&run.dir.join(FINETUNE_METRICS_FILE), &report.epochs)?;
    Ok(report)
}

pub fn finetune_from_epoch(run: &Run, splits: &DataSplits, cfg: &FinetuneConfig, epoch: usize) -> Result<FinetuneReport> {
    let rec = load_run_checkpoint(run, epoch)?;
    log::info!("fine-tuning from epoch {epoch}");
    finetune_classification(&run.manifest.config.model, &rec.params, splits, cfg, run.manifest.seed)
}

/// Write per-epoch fine-tuning metrics.
pub fn write_finetune_metrics(path: &Path, epochs: &[FinetuneEpoch]) -> Result<()> {
    write_csv(path, epochs)
}
