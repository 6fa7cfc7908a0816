//! `.tpmc` checkpoint files.
//!
//! Layout, little-endian throughout: magic `TPMC`, version `u32`, header
//! length `u64`, header JSON, tensor count `u32`, then per tensor
//! `{name length u16, UTF-8 name, dtype u8 (0 = f32), rank u8, dims u32 x
//! rank, payload}`, and finally a CRC32 over every byte between the version
//! field and the checksum.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::AdamW;
use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TPMC";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const MOMENT_PREFIX: &str = "optim.m.";
const VARIANCE_PREFIX: &str = "optim.v.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    /// SHA-256 of the run's `manifest.json`.
    pub manifest_sha256: String,
    pub epoch: usize,
    pub mask_ratios: Vec<f64>,
    pub model: ModelConfig,
    /// Mean epoch loss per mask.
    pub losses: Vec<f64>,
    pub optimizer_step: u64,
}

/// Adam moments saved alongside the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
}

impl From<&AdamW> for OptimizerState {
    fn from(opt: &AdamW) -> Self {
        Self {
            m: opt.m.clone(),
            v: opt.v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRecord {
    pub header: CheckpointHeader,
    pub params: ModelParams,
    pub optimizer: Option<OptimizerState>,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::param(format!("tensor name too long: {name}")))?;
    let rank = u8::try_from(t.rank()).map_err(|_| Error::param(format!("rank of {name} exceeds 255")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(DTYPE_F32);
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::param(format!("dimension of {name} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

impl CheckpointRecord {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut tensors: Vec<(String, &Tensor<f32>)> = self.params.iter().map(|(n, t)| (n.clone(), t)).collect();
        if let Some(opt) = &self.optimizer {
            tensors.extend(opt.m.iter().map(|(n, t)| (format!("{MOMENT_PREFIX}{n}"), t)));
            tensors.extend(opt.v.iter().map(|(n, t)| (format!("{VARIANCE_PREFIX}{n}"), t)));
        }
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let count = u32::try_from(tensors.len()).map_err(|_| Error::param("too many tensors"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &tensors {
            put_tensor(&mut out, name, t)?;
        }
        let crc = crc32fast::hash(&out[8..]);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                reason: "bad magic, expected TPMC".into(),
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        if bytes.len() < 12 {
            return Err(r.fail("truncated before checksum"));
        }
        let body_end = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
        if crc32fast::hash(&bytes[8..body_end]) != stored {
            return Err(Error::Format {
                offset: body_end as u64,
                reason: "checksum mismatch".into(),
            });
        }
        let mut r = Reader {
            bytes: &bytes[..body_end],
            pos: 8,
        };
        let header_len = r.u64()? as usize;
        let header_at = r.pos;
        let header: CheckpointHeader = serde_json::from_slice(r.take(header_len)?).map_err(|e| Error::Format {
            offset: header_at as u64,
            reason: format!("header: {e}"),
        })?;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        for _ in 0..count {
            let at = r.pos;
            let (name, t) = r.tensor()?;
            let (store, key) = if let Some(k) = name.strip_prefix(MOMENT_PREFIX) {
                (&mut m, k.to_string())
            } else if let Some(k) = name.strip_prefix(VARIANCE_PREFIX) {
                (&mut v, k.to_string())
            } else {
                (&mut params, name)
            };
            store.insert(key, t).map_err(|e| Error::Format {
                offset: at as u64,
                reason: e.to_string(),
            })?;
        }
        if r.pos != body_end {
            return Err(r.fail("trailing bytes after tensors"));
        }
        let optimizer = if m.is_empty() && v.is_empty() {
            None
        } else {
            Some(OptimizerState { m, v })
        };
        Ok(Self {
            header,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: &str) -> Error {
        Error::Format {
            offset: self.pos as u64,
            reason: reason.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.fail("truncated"));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let len = self.u16()? as usize;
        let at = self.pos;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| Error::Format {
                offset: at as u64,
                reason: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        if self.u8()? != DTYPE_F32 {
            return Err(self.fail("unsupported dtype"));
        }
        let rank = self.u8()? as usize;
        let shape = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| self.fail("tensor size overflows"))?;
        let data = self
            .take(numel)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::pipeline::optim::OptimizerConfig;

    fn record() -> CheckpointRecord {
        let cfg = ModelConfig::desk();
        let params = init_params(&cfg, 3).unwrap();
        let opt = AdamW::new(OptimizerConfig::default(), &params);
        CheckpointRecord {
            header: CheckpointHeader {
                manifest_sha256: "ab".into(),
                epoch: 1,
                mask_ratios: vec![0.6, 0.5, 0.4],
                model: cfg,
                losses: vec![0.1, 0.2, 0.3],
                optimizer_step: 7,
            },
            params,
            optimizer: Some((&opt).into()),
        }
    }

    #[test]
    fn roundtrip() {
        let r = record();
        let bytes = r.to_bytes().unwrap();
        assert_eq!(CheckpointRecord::from_bytes(&bytes).unwrap(), r);
    }

    #[test]
    fn corruption_detected() {
        let mut bytes = record().to_bytes().unwrap();
        let n = bytes.len();
        bytes[n / 2] ^= 0x01;
        assert!(matches!(CheckpointRecord::from_bytes(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn version_and_truncation() {
        let mut bytes = record().to_bytes().unwrap();
        bytes[4] = 2;
        assert!(matches!(
            CheckpointRecord::from_bytes(&bytes),
            Err(Error::Version { found: 2, supported: 1 })
        ));
        let bytes = record().to_bytes().unwrap();
        assert!(matches!(CheckpointRecord::from_bytes(&bytes[..100]), Err(Error::Format { .. })));
        assert!(matches!(CheckpointRecord::from_bytes(b"TPMX"), Err(Error::Format { offset: 0, .. })));
    }
}
