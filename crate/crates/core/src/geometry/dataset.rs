//! `TPMD` split files.
//!
//! Layout, little-endian: magic `TPMD`, version `u32 = 1`, record count
//! `u32`, points per cloud `u32`, then per record a `u16` label followed by
//! `n * 3` binary32 coordinates, row-major.

use std::fs;
use std::path::Path;

use super::cloud::PointCloud;
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"TPMD";
pub const DATASET_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub points_per_cloud: usize,
    pub clouds: Vec<PointCloud>,
}

impl Dataset {
    pub fn new(points_per_cloud: usize, clouds: Vec<PointCloud>) -> Result<Self> {
        if let Some(c) = clouds.iter().find(|c| c.len() != points_per_cloud) {
            return Err(Error::param(format!(
                "cloud with {} points in a {points_per_cloud}-point dataset",
                c.len()
            )));
        }
        Ok(Self {
            points_per_cloud,
            clouds,
        })
    }

    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    pub fn labels(&self) -> Vec<u32> {
        self.clouds.iter().map(|c| c.label.unwrap_or(0)).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.labels().into_iter().max().map_or(0, |m| m as usize + 1)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.len() * (2 + self.points_per_cloud * 12));
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&u32::try_from(self.len()).map_err(|_| Error::param("too many records"))?.to_le_bytes());
        out.extend_from_slice(&(self.points_per_cloud as u32).to_le_bytes());
        for c in &self.clouds {
            let label = c.label.unwrap_or(0);
            let label = u16::try_from(label).map_err(|_| Error::param(format!("label {label} exceeds u16")))?;
            out.extend_from_slice(&label.to_le_bytes());
            for v in c.points.iter().flatten() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |offset: usize, reason: &str| Error::Format {
            offset: offset as u64,
            reason: reason.to_string(),
        };
        if bytes.len() < HEADER_LEN {
            return Err(fail(bytes.len(), "truncated header"));
        }
        if &bytes[..4] != DATASET_MAGIC {
            return Err(fail(0, "bad magic, expected TPMD"));
        }
        let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = word(4);
        if version != DATASET_VERSION {
            return Err(Error::Version {
                found: version,
                supported: DATASET_VERSION,
            });
        }
        let count = word(8) as usize;
        let n = word(12) as usize;
        if n == 0 {
            return Err(fail(12, "zero points per cloud"));
        }
        let record = 2 + n * 12;
        let expected = HEADER_LEN + count * record;
        if bytes.len() != expected {
            return Err(fail(
                bytes.len().min(expected),
                &format!("expected {expected} bytes for {count} records, found {}", bytes.len()),
            ));
        }
        let mut clouds = Vec::with_capacity(count);
        for r in 0..count {
            let base = HEADER_LEN + r * record;
            let label = u16::from_le_bytes([bytes[base], bytes[base + 1]]);
            let points = bytes[base + 2..base + record]
                .chunks_exact(12)
                .map(|c| std::array::from_fn(|k| f32::from_le_bytes(c[k * 4..k * 4 + 4].try_into().unwrap())))
                .collect();
            let cloud = PointCloud::new(points, Some(label as u32))
                .map_err(|e| fail(base, &e.to_string()))?;
            clouds.push(cloud);
        }
        Dataset::new(n, clouds)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub const TRAIN_FILE: &str = "train.tpmd";
pub const VAL_FILE: &str = "val.tpmd";

/// A directory holding `train.tpmd` and `val.tpmd`.
#[derive(Clone, Debug)]
pub struct DataSplits {
    pub train: Dataset,
    pub val: Dataset,
}

impl DataSplits {
    pub fn load(dir: &Path) -> Result<Self> {
        let train = Dataset::read(&dir.join(TRAIN_FILE))?;
        let val = Dataset::read(&dir.join(VAL_FILE))?;
        if train.points_per_cloud != val.points_per_cloud {
            return Err(Error::param("train and val splits differ in points per cloud"));
        }
        if train.is_empty() || val.is_empty() {
            return Err(Error::param("dataset splits must be non-empty"));
        }
        Ok(Self { train, val })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.train.write(&dir.join(TRAIN_FILE))?;
        self.val.write(&dir.join(VAL_FILE))
    }
}
