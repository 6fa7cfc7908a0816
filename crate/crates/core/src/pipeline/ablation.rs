//! Grid over mask constructions, loss weighting modes, and selection rules.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::finetune::finetune_from_epoch;
use super::metrics::write_csv;
use super::pretrain::pretrain;
use crate::error::{Error, Result};
use crate::geometry::DataSplits;
use crate::loss::LambdaMode;
use crate::masking::MaskSpec;
use crate::probe::{select_with_rule, SelectionRule};

pub const ABLATION_FILE: &str = "ablation.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct AblationPlan {
    pub constructions: Vec<MaskSpec>,
    pub lambda_modes: Vec<LambdaMode>,
    /// Rules whose mask index exceeds a construction's length are skipped
    /// for that construction.
    pub selection_rules: Vec<SelectionRule>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub construction: String,
    pub lambda_mode: String,
    pub selection_rule: String,
    pub final_svm_acc: f64,
    pub finetune_acc: f64,
    pub seconds: f64,
}

/// Pre-train, probe, select, and fine-tune every cell of the grid. Each
/// cell gets its own run directory under `out_dir`; the grid is written to
/// `out_dir/ablation.csv`.
pub fn ablate(base: &RunConfig, splits: &DataSplits, plan: &AblationPlan, out_dir: &Path) -> Result<Vec<AblationRow>> {
    if plan.constructions.is_empty() || plan.lambda_modes.is_empty() || plan.selection_rules.is_empty() {
        return Err(Error::param("ablation needs constructions, lambda modes, and selection rules"));
    }
    let mut rows = Vec::new();
    for (ci, spec) in plan.constructions.iter().enumerate() {
        for &mode in &plan.lambda_modes {
            let started = Instant::now();
            let mut cfg = base.clone();
            cfg.masking.ratios = Some(spec.ratios().to_vec());
            cfg.masking.lambda_mode = mode;
            cfg.train.probe_each_epoch = true;
            let cell = out_dir.join(format!("cell{ci:02}_{mode}"));
            log::info!("ablation cell {spec} / {mode}");
            let outcome = pretrain(&cfg, splits, &cell)?;
            let pretrain_seconds = started.elapsed().as_secs_f64();
            for &rule in plan.selection_rules.iter().filter(|r| r.0 < spec.len()) {
                let rule_started = Instant::now();
                let sel = select_with_rule(&outcome.probe_rows, rule)?;
                let ft = finetune_from_epoch(&outcome.run, splits, &cfg.finetune, sel.selected_epoch)?;
                let seconds = if base.train.wall_clock_metrics {
                    pretrain_seconds + rule_started.elapsed().as_secs_f64()
                } else {
                    0.0
                };
                rows.push(AblationRow {
                    construction: spec.to_string(),
                    lambda_mode: mode.to_string(),
                    selection_rule: rule.to_string(),
                    final_svm_acc: sel.selected_accuracy,
                    finetune_acc: ft.final_val_accuracy,
                    seconds,
                });
                write_csv(&out_dir.join(ABLATION_FILE), &rows)?;
            }
        }
    }
    Ok(rows)
}
