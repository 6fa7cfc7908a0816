//! Checkpoint selection from per-epoch, per-mask probe accuracies.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One row of `probe_metrics.csv`. Epochs are 1-indexed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub epoch: usize,
    pub mask_index: usize,
    pub svm_accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskBest {
    pub mask_index: usize,
    pub epoch: usize,
    pub accuracy: f64,
}

/// Which mask's best checkpoint is handed to fine-tuning: rule `i` picks
/// the weights that probe best under mask `i`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SelectionRule(pub usize);

impl fmt::Display for SelectionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "w{0}->m{0}", self.0)
    }
}

impl FromStr for SelectionRule {
    type Err = Error;

    /// Accepts `w1->m1`, `w1`, or a bare index.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let head = s.split("->").next().unwrap_or(s);
        let digits = head.trim_start_matches('w');
        let i: usize = digits
            .parse()
            .map_err(|_| Error::Parse(format!("bad selection rule {s:?}")))?;
        if let Some(tail) = s.split("->").nth(1) {
            if tail.trim_start_matches('m') != digits {
                return Err(Error::Parse(format!("selection rule {s:?} must pair w_i with m_i")));
            }
        }
        Ok(Self(i))
    }
}

/// Serialized as `selection.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub selected_epoch: usize,
    pub selected_mask_index: usize,
    pub selected_accuracy: f64,
    pub per_mask_best: Vec<MaskBest>,
}

impl SelectionResult {
    pub fn best_for(&self, mask_index: usize) -> Option<&MaskBest> {
        self.per_mask_best.iter().find(|b| b.mask_index == mask_index)
    }
}

/// Highest accuracy per mask, earliest epoch on ties.
pub fn per_mask_best(rows: &[ProbeRow]) -> Result<Vec<MaskBest>> {
    if rows.is_empty() {
        return Err(Error::param("probe table is empty"));
    }
    let masks = rows.iter().map(|r| r.mask_index).max().unwrap() + 1;
    let mut best: Vec<Option<MaskBest>> = vec![None; masks];
    for r in rows {
        if !r.svm_accuracy.is_finite() {
            return Err(Error::param(format!("non-finite accuracy at epoch {}", r.epoch)));
        }
        let slot = &mut best[r.mask_index];
        let better = match slot {
            None => true,
            Some(b) => r.svm_accuracy > b.accuracy || (r.svm_accuracy == b.accuracy && r.epoch < b.epoch),
        };
        if better {
            *slot = Some(MaskBest {
                mask_index: r.mask_index,
                epoch: r.epoch,
                accuracy: r.svm_accuracy,
            });
        }
    }
    best.into_iter()
        .enumerate()
        .map(|(i, b)| b.ok_or_else(|| Error::param(format!("probe table has no rows for mask {i}"))))
        .collect()
}

/// Final choice under `rule`.
pub fn select_with_rule(rows: &[ProbeRow], rule: SelectionRule) -> Result<SelectionResult> {
    let per_mask_best = per_mask_best(rows)?;
    let chosen = *per_mask_best
        .get(rule.0)
        .ok_or_else(|| Error::param(format!("rule {rule} but probe table has {} masks", per_mask_best.len())))?;
    Ok(SelectionResult {
        selected_epoch: chosen.epoch,
        selected_mask_index: chosen.mask_index,
        selected_accuracy: chosen.accuracy,
        per_mask_best,
    })
}

/// The default `w0 -> m0` selection.
pub fn select_weights(rows: &[ProbeRow]) -> Result<SelectionResult> {
    select_with_rule(rows, SelectionRule(0))
}
