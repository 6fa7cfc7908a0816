//! CSV and JSON metric files.

use std::fs;
use std::path::Path;

use serde::{de::DeserializeOwned, Serialize};

use crate::error::{Error, Result};
use crate::probe::{ProbeRow, SelectionResult};

/// One row of `pretrain_metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_total: f64,
    /// Mean loss per mask, in mask order.
    pub losses: Vec<f64>,
    pub lr: f64,
    pub seconds: f64,
}

pub fn pretrain_header(masks: usize) -> Vec<String> {
    let mut h = vec!["epoch".to_string(), "loss_total".to_string()];
    h.extend((0..masks).map(|i| format!("loss_m{i}")));
    h.extend(["lr".to_string(), "seconds".to_string()]);
    h
}

pub fn write_pretrain_metrics(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let masks = rows.first().map_or(3, |r| r.losses.len());
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(pretrain_header(masks))?;
    for r in rows {
        let mut rec = vec![r.epoch.to_string(), r.loss_total.to_string()];
        rec.extend(r.losses.iter().map(f64::to_string));
        rec.extend([r.lr.to_string(), r.seconds.to_string()]);
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pretrain_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let masks = header.len().checked_sub(4).ok_or_else(|| Error::Parse("short metrics header".into()))?;
    if header.iter().collect::<Vec<_>>() != pretrain_header(masks) {
        return Err(Error::Parse(format!("unexpected metrics header {header:?}")));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Parse(format!("bad number {s:?}")));
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok(EpochMetrics {
                epoch: rec[0].parse().map_err(|_| Error::Parse(format!("bad epoch {:?}", &rec[0])))?,
                loss_total: num(&rec[1])?,
                losses: (0..masks).map(|i| num(&rec[2 + i])).collect::<Result<_>>()?,
                lr: num(&rec[2 + masks])?,
                seconds: num(&rec[3 + masks])?,
            })
        })
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn write_probe_metrics(path: &Path, rows: &[ProbeRow]) -> Result<()> {
    write_csv(path, rows)
}

pub fn read_probe_metrics(path: &Path) -> Result<Vec<ProbeRow>> {
    read_csv(path)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

pub fn write_selection(path: &Path, s: &SelectionResult) -> Result<()> {
    write_json(path, s)
}

pub fn read_selection(path: &Path) -> Result<SelectionResult> {
    read_json(path)
}
