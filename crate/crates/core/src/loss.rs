//! Chamfer reconstruction distance and the weighted multi-mask objective.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Real};
use crate::error::{Error, Result};
use crate::masking::MaskSpec;

/// How per-mask losses are weighted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    /// `lambda_i = m_i / sum_j m_j`.
    #[default]
    Normalized,
    /// `lambda_i = 1`.
    Uniform,
}

impl std::str::FromStr for LambdaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "normalized" => Ok(Self::Normalized),
            "uniform" => Ok(Self::Uniform),
            other => Err(Error::Parse(format!("unknown lambda mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for LambdaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Normalized => "normalized",
            Self::Uniform => "uniform",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub lambdas: Vec<f64>,
}

/// Mask-proportional weights: the denominator sums exactly the masks in
/// `spec`.
pub fn loss_weights(spec: &MaskSpec) -> LossWeights {
    loss_weights_with(spec, LambdaMode::Normalized)
}

pub fn loss_weights_with(spec: &MaskSpec, mode: LambdaMode) -> LossWeights {
    let lambdas = match mode {
        LambdaMode::Normalized => {
            let total: f64 = spec.ratios().iter().sum();
            spec.ratios().iter().map(|m| m / total).collect()
        }
        LambdaMode::Uniform => vec![1.0; spec.len()],
    };
    LossWeights { lambdas }
}

/// Mean over patches of the Chamfer distance between predicted and true
/// patches, both `P x S x 3` in centre-local coordinates.
pub fn reconstruction_loss<T: Real>(g: &mut Graph<T>, pred: NodeId, truth: NodeId) -> Result<NodeId> {
    if g.shape(pred) != g.shape(truth) || g.shape(pred).len() != 3 {
        return Err(Error::shape(format!(
            "reconstruction loss between {:?} and {:?}",
            g.shape(pred),
            g.shape(truth)
        )));
    }
    g.chamfer(pred, truth)
}

/// `sum_i lambda_i * L_i` as one node.
pub fn tpm_total_loss<T: Real>(g: &mut Graph<T>, losses: &[NodeId], weights: &LossWeights) -> Result<NodeId> {
    if losses.len() != weights.lambdas.len() || losses.is_empty() {
        return Err(Error::param(format!(
            "{} losses with {} weights",
            losses.len(),
            weights.lambdas.len()
        )));
    }
    let mut total: Option<NodeId> = None;
    for (&l, &w) in losses.iter().zip(&weights.lambdas) {
        let term = g.scale(l, w)?;
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Plain-value Chamfer distance, for use outside a graph.
pub fn chamfer(a: &[[f32; 3]], b: &[[f32; 3]]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::param("chamfer distance of an empty set"));
    }
    let mut g = Graph::<f64>::new();
    let flat = |s: &[[f32; 3]]| s.iter().flatten().map(|&v| v as f64).collect::<Vec<_>>();
    let ta = g.input(crate::autodiff::Tensor::new(vec![a.len(), 3], flat(a))?)?;
    let tb = g.input(crate::autodiff::Tensor::new(vec![b.len(), 3], flat(b))?)?;
    let d = g.chamfer(ta, tb)?;
    Ok(g.value(d).item())
}
