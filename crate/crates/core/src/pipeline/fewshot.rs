//! Episodic w-way s-shot evaluation with a frozen encoder.

use std::fmt;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use super::config::FewshotConfig;
use super::finetune::{argmax_rows, encoder_params, head_logits, init_head};
use super::manifest::{Run, FEWSHOT_FILE};
use super::metrics::{read_selection, write_json};
use super::pretrain::load_run_checkpoint;
use super::optim::{AdamW, OptimizerConfig, Schedule};
use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::geometry::Dataset;
use crate::model::{ModelConfig, ModelParams};
use crate::probe::{extract_features, SelectionRule, Standardizer};
use crate::rng::{derive_seed, rng_for, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewshotProtocol {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub trials: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewshotResult {
    pub protocol: FewshotProtocol,
    /// Query accuracy per trial, as fractions.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over trials (zero for a single trial).
    pub std: f64,
}

impl fmt::Display for FewshotResult {
    /// Percentages, e.g. `5-way 10-shot: 91.20 ± 3.10 (10 trials)`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}-way {}-shot: {:.2} ± {:.2} ({} trials)",
            self.protocol.way,
            self.protocol.shot,
            100.0 * self.mean,
            100.0 * self.std,
            self.protocol.trials
        )
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Train a head on standardized support features; return query accuracy.
fn run_episode(
    support: &[Vec<f32>],
    support_y: &[usize],
    query: &[Vec<f32>],
    query_y: &[usize],
    way: usize,
    cfg: &FewshotConfig,
    seed: u64,
) -> Result<f64> {
    let std = Standardizer::fit(support)?;
    let to_tensor = |rows: Vec<Vec<f64>>| {
        let dim = rows[0].len();
        Tensor::new(vec![rows.len(), dim], rows.into_iter().flatten().map(|v| v as f32).collect())
    };
    let xs = to_tensor(std.apply(support)?)?;
    let xq = to_tensor(std.apply(query)?)?;
    let dim = xs.shape()[1];
    let mut head = init_head(dim, cfg.head_hidden, way, seed)?;
    let opt_cfg = OptimizerConfig {
        lr: cfg.lr,
        ..OptimizerConfig::default()
    };
    let mut opt = AdamW::new(opt_cfg.clone(), &head);
    let schedule = Schedule::new(&opt_cfg, cfg.head_steps);
    let xs = std::sync::Arc::new(xs);
    for step in 0..cfg.head_steps {
        let mut g = Graph::<f32>::new();
        let h = head.attach(&mut g)?;
        let x = g.input(xs.clone())?;
        let logits = head_logits(&mut g, &h, x)?;
        let loss = g.cross_entropy(logits, support_y)?;
        let grads = g.backward(loss)?;
        opt.update(&mut head, &grads, schedule.at(step))?;
    }
    let mut g = Graph::<f32>::new();
    let h = head.attach_frozen(&mut g)?;
    let x = g.input(xq)?;
    let logits = head_logits(&mut g, &h, x)?;
    let pred = argmax_rows(g.value(logits));
    let hits = pred.iter().zip(query_y).filter(|(p, y)| **p as usize == **y).count();
    Ok(hits as f64 / query_y.len() as f64)
}

/// Run `protocol.trials` episodes on `dataset` with the encoder frozen.
pub fn fewshot_eval(
    model: &ModelConfig,
    params: &ModelParams,
    dataset: &Dataset,
    protocol: FewshotProtocol,
    cfg: &FewshotConfig,
) -> Result<FewshotResult> {
    let FewshotProtocol {
        way,
        shot,
        query,
        trials,
        seed,
    } = protocol;
    if way == 0 || shot == 0 || query == 0 || trials == 0 {
        return Err(Error::param("way, shot, query, and trials must be positive"));
    }
    let labels = dataset.labels();
    let num_classes = dataset.num_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y as usize].push(i);
    }
    let eligible: Vec<usize> = (0..num_classes).filter(|&c| by_class[c].len() >= shot + query).collect();
    if eligible.len() < way {
        return Err(Error::param(format!(
            "{way}-way {shot}-shot with {query} queries needs {way} classes of at least {} samples; {} qualify",
            shot + query,
            eligible.len()
        )));
    }

    let base = derive_seed(seed, &[stream::FEWSHOT]);
    let encoder = encoder_params(model, params)?;
    let features = extract_features(&encoder, model, &dataset.clouds, None, derive_seed(base, &[0]))?;

    let mut accuracies = Vec::with_capacity(trials);
    for trial in 0..trials {
        let mut rng = rng_for(base, &[1, trial as u64]);
        let chosen = index::sample(&mut rng, eligible.len(), way);
        let (mut sx, mut sy, mut qx, mut qy) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (k, ci) in chosen.iter().enumerate() {
            let mut members = by_class[eligible[ci]].clone();
            members.shuffle(&mut rng);
            for &i in &members[..shot] {
                sx.push(features[i].clone());
                sy.push(k);
            }
            for &i in &members[shot..shot + query] {
                qx.push(features[i].clone());
                qy.push(k);
            }
        }
        let acc = run_episode(&sx, &sy, &qx, &qy, way, cfg, derive_seed(base, &[2, trial as u64]))?;
        log::info!("few-shot trial {}: {:.4}", trial + 1, acc);
        accuracies.push(acc);
    }
    let (mean, std) = mean_std(&accuracies);
    Ok(FewshotResult {
        protocol,
        accuracies,
        mean,
        std,
    })
}

/// Few-shot evaluation of the checkpoint chosen by `rule`; writes
/// `fewshot.json` into the run directory.
pub fn fewshot_run(
    run: &Run,
    dataset: &Dataset,
    protocol: FewshotProtocol,
    cfg: &FewshotConfig,
    rule: SelectionRule,
) -> Result<FewshotResult> {
    let selection = read_selection(&run.selection_path())?;
    let best = selection
        .best_for(rule.0)
        .ok_or_else(|| Error::param(format!("selection has no entry for rule {rule}")))?;
    let rec = load_run_checkpoint(run, best.epoch)?;
    let result = fewshot_eval(&run.manifest.config.model, &rec.params, dataset, protocol, cfg)?;
    write_json(&run.dir.join(FEWSHOT_FILE), &result)?;
    Ok(result)
}
