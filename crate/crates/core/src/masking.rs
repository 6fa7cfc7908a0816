//! Mask ratio constructions and concrete masked/visible patch partitions.

use std::fmt;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::rng_for;

/// The ratio assigned to the medium mask.
pub const MEDIUM_MASK: f64 = 0.5;
pub const MAX_MASKS: usize = 4;

/// Ordered mask ratios, strictly decreasing, each in (0, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    ratios: Vec<f64>,
}

impl MaskSpec {
    pub fn new(ratios: Vec<f64>) -> Result<Self> {
        if ratios.is_empty() || ratios.len() > MAX_MASKS {
            return Err(Error::param(format!(
                "a mask construction holds 1 to {MAX_MASKS} ratios, got {}",
                ratios.len()
            )));
        }
        if let Some(r) = ratios.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
            return Err(Error::param(format!("mask ratio {r} outside (0, 1)")));
        }
        if ratios.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::param(format!("mask ratios {ratios:?} are not strictly decreasing")));
        }
        Ok(Self { ratios })
    }

    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }

    pub fn len(&self) -> usize {
        self.ratios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratios.is_empty()
    }

    /// Comma-separated ratio list.
    pub fn parse(s: &str) -> Result<Self> {
        let ratios = s
            .split(',')
            .map(|t| {
                let t = t.trim();
                t.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("`{t}` is not a mask ratio")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(ratios).map_err(|e| Error::Parse(format!("`{s}`: {e}")))
    }
}

impl fmt::Display for MaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.ratios.iter().map(|r| format!("{r}")).collect();
        f.write_str(&parts.join(","))
    }
}

/// The triple `(m0, 0.5, 1 - m0)` built from a base ratio `m0 in (0.5, 1)`.
pub fn derive_mask_triple(m0: f64) -> Result<MaskSpec> {
    if !(m0 > MEDIUM_MASK && m0 < 1.0) {
        return Err(Error::param(format!("base mask ratio must lie in (0.5, 1), got {m0}")));
    }
    // keeps 1 - 0.7 printing as 0.3
    let m2 = ((1.0 - m0) * 1e12).round() / 1e12;
    MaskSpec::new(vec![m0, MEDIUM_MASK, m2])
}

/// Parse semicolon-separated constructions of 2 to 4 ratios each, e.g.
/// `"0.6,0.5,0.4;0.6,0.4"`.
pub fn parse_constructions(s: &str) -> Result<Vec<MaskSpec>> {
    let specs = s
        .split(';')
        .filter(|t| !t.trim().is_empty())
        .map(MaskSpec::parse)
        .collect::<Result<Vec<_>>>()?;
    if specs.is_empty() {
        return Err(Error::Parse("no mask constructions given".into()));
    }
    if let Some(bad) = specs.iter().find(|m| m.len() < 2) {
        return Err(Error::Parse(format!("construction `{bad}` needs 2 to {MAX_MASKS} ratios")));
    }
    Ok(specs)
}

/// Number of masked patches: `G * ratio` rounded half away from zero.
pub fn masked_count(patches: usize, ratio: f64) -> usize {
    (patches as f64 * ratio).round() as usize
}

/// A partition of patch indices into masked and visible sets, each sorted.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskAssignment {
    pub masked: Vec<usize>,
    pub visible: Vec<usize>,
    pub ratio: f64,
}

impl MaskAssignment {
    pub fn num_patches(&self) -> usize {
        self.masked.len() + self.visible.len()
    }

    /// Assignment with every patch visible.
    pub fn all_visible(patches: usize) -> Self {
        Self {
            masked: Vec::new(),
            visible: (0..patches).collect(),
            ratio: 0.0,
        }
    }
}

/// Uniformly random masked subset without replacement.
pub fn sample_mask(patches: usize, ratio: f64, seed: u64) -> Result<MaskAssignment> {
    if patches == 0 {
        return Err(Error::param("cannot mask zero patches"));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::param(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let count = masked_count(patches, ratio);
    if count == 0 || count == patches {
        return Err(Error::DegenerateMask {
            patches,
            ratio,
            masked: count,
        });
    }
    let mut order: Vec<usize> = (0..patches).collect();
    order.shuffle(&mut rng_for(seed, &[patches as u64]));
    let mut masked = order[..count].to_vec();
    let mut visible = order[count..].to_vec();
    masked.sort_unstable();
    visible.sort_unstable();
    Ok(MaskAssignment {
        masked,
        visible,
        ratio,
    })
}
