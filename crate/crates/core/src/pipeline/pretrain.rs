//! Multi-mask pre-training, per-epoch probing, and checkpoint selection.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;

use super::checkpoint::{CheckpointHeader, CheckpointRecord};
use super::config::RunConfig;
use super::manifest::{Run, RunManifest};
use super::metrics::{read_probe_metrics, write_pretrain_metrics, write_probe_metrics, write_selection, EpochMetrics};
use super::optim::{AdamW, Schedule};
use crate::autodiff::{Gradients, Graph};
use crate::error::{Error, Result};
use crate::geometry::{patchify, DataSplits, PointCloud};
use crate::loss::{loss_weights_with, LossWeights};
use crate::masking::{sample_mask, MaskSpec};
use crate::model::{check_compatible, init_params, tpm_objective, ModelConfig, ModelParams, Supervision};
use crate::probe::{probe_params, select_weights, ProbeRow, SelectionResult, SvmOptions};
use crate::rng::{derive_seed, rng_for, stream};

/// Loss values and parameter gradients for one cloud.
#[derive(Clone, Debug)]
pub struct SampleStep {
    pub total: f64,
    pub branches: Vec<f64>,
    pub grads: Gradients<f32>,
}

/// Patchify `cloud` once, draw one independent partition per mask, and
/// backpropagate the weighted objective through the shared parameters.
#[allow(clippy::too_many_arguments)]
pub fn sample_step(
    params: &ModelParams,
    cfg: &ModelConfig,
    cloud: &PointCloud,
    spec: &MaskSpec,
    weights: &LossWeights,
    supervision: Supervision,
    seed: u64,
) -> Result<SampleStep> {
    let patches = patchify(cloud, cfg.patch_count, cfg.patch_size, derive_seed(seed, &[stream::PATCH]))?;
    let assignments = spec
        .ratios()
        .iter()
        .enumerate()
        .map(|(i, &r)| sample_mask(cfg.patch_count, r, derive_seed(seed, &[stream::MASK, i as u64])))
        .collect::<Result<Vec<_>>>()?;
    let mut g = Graph::<f32>::new();
    let h = params.attach(&mut g)?;
    let loss = tpm_objective(&mut g, &h, cfg, cloud, &patches, &assignments, weights, supervision)?;
    let grads = g.backward(loss.total)?;
    Ok(SampleStep {
        total: g.value(loss.total).item() as f64,
        branches: loss.branches.iter().map(|&b| g.value(b).item() as f64).collect(),
        grads,
    })
}

fn diverged(epoch: usize, batch: usize, e: impl ToString) -> Error {
    Error::Diverged {
        epoch,
        batch,
        reason: e.to_string(),
    }
}

/// Probe accuracy of `params` under every mask of `spec`.
pub fn probe_epoch(
    params: &ModelParams,
    cfg: &ModelConfig,
    splits: &DataSplits,
    spec: &MaskSpec,
    opts: &SvmOptions,
    seed: u64,
    epoch: usize,
) -> Result<Vec<ProbeRow>> {
    let probe_seed = derive_seed(seed, &[stream::PROBE]);
    spec.ratios()
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            Ok(ProbeRow {
                epoch,
                mask_index: i,
                svm_accuracy: probe_params(params, cfg, splits, Some(r), opts, probe_seed)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub run: Run,
    pub metrics: Vec<EpochMetrics>,
    pub probe_rows: Vec<ProbeRow>,
    pub selection: Option<SelectionResult>,
    pub final_params: ModelParams,
}

pub fn pretrain(config: &RunConfig, splits: &DataSplits, out_dir: &Path) -> Result<PretrainOutcome> {
    let manifest = RunManifest::new(config, splits)?;
    let run = Run::create(out_dir, manifest)?;
    let cfg = &config.model;
    let seed = config.train.seed;
    let spec = config.mask_spec()?;
    let weights = loss_weights_with(&spec, config.masking.lambda_mode);
    let supervision = config.masking.supervision;

    let mut params = init_params(cfg, seed)?;
    let mut opt = AdamW::new(config.optimizer.clone(), &params);
    let n = splits.train.len();
    let batch_size = config.train.batch_size;
    let batches = n.div_ceil(batch_size);
    let schedule = Schedule::new(&config.optimizer, config.train.epochs * batches);

    let mut metrics = Vec::new();
    let mut probe_rows = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;
    for epoch in 1..=config.train.epochs {
        let started = Instant::now();
        order.sort_unstable();
        order.shuffle(&mut rng_for(seed, &[stream::SHUFFLE, epoch as u64]));
        let mut total = 0.0;
        let mut branches = vec![0.0; spec.len()];
        let mut lr = schedule.at(step);
        for (b, chunk) in order.chunks(batch_size).enumerate() {
            let mut acc: Option<Gradients<f32>> = None;
            for &idx in chunk {
                let s = sample_step(
                    &params,
                    cfg,
                    &splits.train.clouds[idx],
                    &spec,
                    &weights,
                    supervision,
                    derive_seed(seed, &[epoch as u64, idx as u64]),
                )
                .map_err(|e| match e {
                    Error::Numeric { .. } => diverged(epoch, b, e),
                    e => e,
                })?;
                if !s.total.is_finite() {
                    return Err(diverged(epoch, b, "non-finite loss"));
                }
                total += s.total;
                for (a, v) in branches.iter_mut().zip(&s.branches) {
                    *a += v;
                }
                match &mut acc {
                    None => acc = Some(s.grads),
                    Some(a) => a.accumulate(&s.grads)?,
                }
            }
            let mut grads = acc.expect("batches are non-empty");
            grads.scale(1.0 / chunk.len() as f64);
            if !grads.is_finite() {
                return Err(diverged(epoch, b, "non-finite gradient"));
            }
            lr = schedule.at(step);
            opt.update(&mut params, &grads, lr)?;
            step += 1;
            if !params.is_finite() {
                return Err(diverged(epoch, b, "non-finite parameters after update"));
            }
        }
        let losses: Vec<f64> = branches.iter().map(|v| v / n as f64).collect();
        let row = EpochMetrics {
            epoch,
            loss_total: total / n as f64,
            losses: losses.clone(),
            lr,
            seconds: if config.train.wall_clock_metrics {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        log::info!(
            "epoch {epoch}/{}: loss {:.6} in {:.1}s",
            config.train.epochs,
            row.loss_total,
            started.elapsed().as_secs_f64()
        );
        metrics.push(row);
        write_pretrain_metrics(&run.pretrain_metrics_path(), &metrics)?;

        CheckpointRecord {
            header: CheckpointHeader {
                manifest_sha256: run.manifest_sha256.clone(),
                epoch,
                mask_ratios: spec.ratios().to_vec(),
                model: cfg.clone(),
                losses,
                optimizer_step: opt.step,
            },
            params: params.clone(),
            optimizer: Some((&opt).into()),
        }
        .save(&run.checkpoint_path(epoch))?;

        if config.train.probe_each_epoch {
            let rows = probe_epoch(&params, cfg, splits, &spec, &config.probe, seed, epoch)?;
            log::info!(
                "epoch {epoch}: probe accuracies {:?}",
                rows.iter().map(|r| r.svm_accuracy).collect::<Vec<_>>()
            );
            probe_rows.extend(rows);
            write_probe_metrics(&run.probe_metrics_path(), &probe_rows)?;
        }
    }

    let selection = if config.train.probe_each_epoch {
        let s = select_weights(&probe_rows)?;
        write_selection(&run.selection_path(), &s)?;
        Some(s)
    } else {
        None
    };
    Ok(PretrainOutcome {
        run,
        metrics,
        probe_rows,
        selection,
        final_params: params,
    })
}

/// Load a run's checkpoint, verifying it belongs to the run and matches the
/// run's model configuration.
pub fn load_run_checkpoint(run: &Run, epoch: usize) -> Result<CheckpointRecord> {
    let rec = CheckpointRecord::load(&run.checkpoint_path(epoch))?;
    if rec.header.manifest_sha256 != run.manifest_sha256 {
        return Err(Error::Compatibility(format!(
            "checkpoint for epoch {epoch} references a different manifest"
        )));
    }
    if rec.header.model != run.manifest.config.model {
        return Err(Error::Compatibility(format!(
            "checkpoint for epoch {epoch} has a different model configuration"
        )));
    }
    check_compatible(&run.manifest.config.model, &rec.params)?;
    Ok(rec)
}

/// Recompute the probe table from every checkpoint of a finished run and
/// rewrite `probe_metrics.csv`.
pub fn probe_run(run: &Run, splits: &DataSplits) -> Result<Vec<ProbeRow>> {
    let config = &run.manifest.config;
    let spec = MaskSpec::new(run.manifest.mask_ratios.clone())?;
    let mut rows = Vec::new();
    for epoch in run.checkpoint_epochs()? {
        let rec = load_run_checkpoint(run, epoch)?;
        rows.extend(probe_epoch(&rec.params, &config.model, splits, &spec, &config.probe, run.manifest.seed, epoch)?);
        log::info!("probed epoch {epoch}");
    }
    if rows.is_empty() {
        return Err(Error::param(format!("{} has no checkpoints", run.dir.display())));
    }
    write_probe_metrics(&run.probe_metrics_path(), &rows)?;
    Ok(rows)
}

/// Select from the run's probe table and rewrite `selection.json`.
pub fn select_run(run: &Run) -> Result<SelectionResult> {
    let rows = read_probe_metrics(&run.probe_metrics_path())?;
    let s = select_weights(&rows)?;
    write_selection(&run.selection_path(), &s)?;
    Ok(s)
}
