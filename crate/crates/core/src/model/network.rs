//! Forward construction of the masked autoencoder on a [`Graph`].
//!
//! All functions are generic over the scalar type so the same network runs
//! in `f32` for training and in `f64` for gradient verification.

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::init::ModelParams;
use crate::autodiff::{Graph, NodeId, ParamHandles, Real, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{patchify, PatchSet, PointCloud};
use crate::loss::{reconstruction_loss, tpm_total_loss, LossWeights};
use crate::masking::{sample_mask, MaskAssignment};
use crate::rng::{derive_seed, stream};

/// What the reconstruction loss compares.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    /// Chamfer distance between predicted and true masked patches, in
    /// centre-local coordinates.
    #[default]
    MaskedPatches,
    /// Chamfer distance between the whole cloud and the union of visible
    /// patches with predicted masked patches, in cloud coordinates.
    FullCloud,
}

/// Concatenated max- and mean-pooled encoder tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalFeature(pub Vec<f32>);

fn tensor<T: Real>(shape: &[usize], data: impl IntoIterator<Item = f32>) -> Result<Tensor<T>> {
    Tensor::new(shape.to_vec(), data.into_iter().map(|v| T::from_f64(v as f64)).collect())
}

fn linear<T: Real>(g: &mut Graph<T>, h: &ParamHandles, prefix: &str, x: NodeId) -> Result<NodeId> {
    let w = h.get(&format!("{prefix}.w"))?;
    let b = h.get(&format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

fn norm_affine<T: Real>(g: &mut Graph<T>, h: &ParamHandles, prefix: &str, x: NodeId) -> Result<NodeId> {
    let y = g.layer_norm(x)?;
    let y = g.mul(y, h.get(&format!("{prefix}.g"))?)?;
    g.add(y, h.get(&format!("{prefix}.b"))?)
}

fn block<T: Real>(
    g: &mut Graph<T>,
    h: &ParamHandles,
    cfg: &ModelConfig,
    prefix: &str,
    x: NodeId,
    pos: NodeId,
) -> Result<NodeId> {
    let c = cfg.embed_dim;
    let x = g.add(x, pos)?;
    let y = norm_affine(g, h, &format!("{prefix}.ln1"), x)?;
    let qkv = linear(g, h, &format!("{prefix}.attn.qkv"), y)?;
    let q = g.slice(qkv, 1, 0, c)?;
    let k = g.slice(qkv, 1, c, c)?;
    let v = g.slice(qkv, 1, 2 * c, c)?;
    let a = g.attention(q, k, v, cfg.head_count)?;
    let a = linear(g, h, &format!("{prefix}.attn.proj"), a)?;
    let x = g.add(x, a)?;
    let y = norm_affine(g, h, &format!("{prefix}.ln2"), x)?;
    let y = linear(g, h, &format!("{prefix}.mlp.fc1"), y)?;
    let y = g.gelu(y)?;
    let y = linear(g, h, &format!("{prefix}.mlp.fc2"), y)?;
    g.add(x, y)
}

fn position_mlp<T: Real>(g: &mut Graph<T>, h: &ParamHandles, prefix: &str, centers: NodeId) -> Result<NodeId> {
    let y = linear(g, h, &format!("{prefix}.fc1"), centers)?;
    let y = g.gelu(y)?;
    linear(g, h, &format!("{prefix}.fc2"), y)
}

/// Tokens for `patches` (given as `P*S x 3` local points): shared point MLP,
/// max-pool over each patch, then a patch MLP. Hidden layers are
/// normalized before the activation.
fn patch_tokens<T: Real>(
    g: &mut Graph<T>,
    h: &ParamHandles,
    cfg: &ModelConfig,
    local: NodeId,
    count: usize,
) -> Result<NodeId> {
    let y = linear(g, h, "embed.point1", local)?;
    let y = norm_affine(g, h, "embed.norm1", y)?;
    let y = g.gelu(y)?;
    let y = linear(g, h, "embed.point2", y)?;
    let y = g.reshape(y, &[count, cfg.patch_size, cfg.embed_dim])?;
    let y = g.max_axis(y, 1)?;
    let y = linear(g, h, "embed.patch1", y)?;
    let y = norm_affine(g, h, "embed.norm2", y)?;
    let y = g.gelu(y)?;
    linear(g, h, "embed.patch2", y)
}

fn check_patches(cfg: &ModelConfig, patches: &PatchSet, assignment: &MaskAssignment) -> Result<()> {
    if patches.patch_size != cfg.patch_size {
        return Err(Error::shape(format!(
            "patch size {} but model expects {}",
            patches.patch_size, cfg.patch_size
        )));
    }
    let g = patches.num_patches();
    let mut seen = vec![false; g];
    for &i in assignment.masked.iter().chain(&assignment.visible) {
        if i >= g || std::mem::replace(&mut seen[i], true) {
            return Err(Error::shape(format!("assignment does not partition {g} patches")));
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::shape(format!("assignment does not partition {g} patches")));
    }
    if assignment.visible.is_empty() {
        return Err(Error::shape("assignment leaves no visible patch"));
    }
    Ok(())
}

/// Visible-patch tokens (`|visible| x c`) and positional embeddings for all
/// `G` centres (`G x c`).
pub fn embed_patches<T: Real>(
    g: &mut Graph<T>,
    h: &ParamHandles,
    cfg: &ModelConfig,
    patches: &PatchSet,
    assignment: &MaskAssignment,
) -> Result<(NodeId, NodeId)> {
    check_patches(cfg, patches, assignment)?;
    let v = assignment.visible.len();
    let local = g.input(tensor::<T>(
        &[v * cfg.patch_size, 3],
        patches.gather_local(&assignment.visible),
    )?)?;
    let tokens = patch_tokens(g, h, cfg, local, v)?;
    let centers = g.input(tensor::<T>(&[patches.num_patches(), 3], patches.centers_flat())?)?;
    let pos = position_mlp(g, h, "pos", centers)?;
    Ok((tokens, pos))
}

/// Encoder output for the visible patches, `|visible| x c`.
pub fn encode<T: Real>(
    g: &mut Graph<T>,
    h: &ParamHandles,
    cfg: &ModelConfig,
    patches: &PatchSet,
    assignment: &MaskAssignment,
) -> Result<NodeId> {
    let (tokens, pos_all) = embed_patches(g, h, cfg, patches, assignment)?;
    let pos = g.gather(pos_all, &assignment.visible)?;
    let mut x = tokens;
    for i in 0..cfg.encoder_depth {
        x = block(g, h, cfg, &format!("enc.{i}"), x, pos)?;
    }
    norm_affine(g, h, "enc.norm", x)
}

/// Predicted masked patches, `|masked| x S x 3`, centre-local.
pub fn reconstruct<T: Real>(
    g: &mut Graph<T>,
    h: &ParamHandles,
    cfg: &ModelConfig,
    patches: &PatchSet,
    assignment: &MaskAssignment,
) -> Result<NodeId> {
    let m = assignment.masked.len();
    if m == 0 {
        return Err(Error::shape("reconstruction needs at least one masked patch"));
    }
    let encoded = encode(g, h, cfg, patches, assignment)?;
    let v = assignment.visible.len();

    let mask_tokens = g.gather(h.get("mask_token")?, &vec![0; m])?;
    let mut x = g.concat(&[encoded, mask_tokens], 0)?;
    let order: Vec<usize> = assignment.visible.iter().chain(&assignment.masked).copied().collect();
    let centers = g.input(tensor::<T>(
        &[v + m, 3],
        order.iter().flat_map(|&i| patches.centers[i]),
    )?)?;
    let pos = position_mlp(g, h, "dec.pos", centers)?;
    for i in 0..cfg.decoder_depth {
        x = block(g, h, cfg, &format!("dec.{i}"), x, pos)?;
    }
    let x = norm_affine(g, h, "dec.norm", x)?;
    let x = g.slice(x, 0, v, m)?;
    let y = linear(g, h, "dec.head", x)?;
    g.reshape(y, &[m, cfg.patch_size, 3])
}

/// Reconstruction loss of one mask branch.
pub fn branch_loss<T: Real>(
    g: &mut Graph<T>,
    h: &ParamHandles,
    cfg: &ModelConfig,
    cloud: &PointCloud,
    patches: &PatchSet,
    assignment: &MaskAssignment,
    supervision: Supervision,
) -> Result<NodeId> {
    let pred = reconstruct(g, h, cfg, patches, assignment)?;
    let (s, m) = (cfg.patch_size, assignment.masked.len());
    match supervision {
        Supervision::MaskedPatches => {
            let truth = g.input(tensor::<T>(&[m, s, 3], patches.gather_local(&assignment.masked))?)?;
            reconstruction_loss(g, pred, truth)
        }
        Supervision::FullCloud => {
            let offsets = assignment
                .masked
                .iter()
                .flat_map(|&i| std::iter::repeat_n(patches.centers[i], s).flatten());
            let offsets = g.input(tensor::<T>(&[m, s, 3], offsets)?)?;
            let global = g.add(pred, offsets)?;
            let global = g.reshape(global, &[m * s, 3])?;
            let visible = assignment.visible.iter().flat_map(|&i| {
                let c = patches.centers[i];
                patches.patch(i).iter().flat_map(move |p| [p[0] + c[0], p[1] + c[1], p[2] + c[2]])
            });
            let visible = g.input(tensor::<T>(&[assignment.visible.len() * s, 3], visible)?)?;
            let rebuilt = g.concat(&[global, visible], 0)?;
            let truth = g.input(tensor::<T>(&[cloud.len(), 3], cloud.flat())?)?;
            g.chamfer(rebuilt, truth)
        }
    }
}

/// Nodes of the weighted multi-mask objective.
#[derive(Clone, Debug)]
pub struct TpmLoss {
    pub total: NodeId,
    pub branches: Vec<NodeId>,
}

/// Every branch runs through the same attached parameters, so one backward
/// pass from `total` yields the shared-weight gradient.
#[allow(clippy::too_many_arguments)]
pub fn tpm_objective<T: Real>(
    g: &mut Graph<T>,
    h: &ParamHandles,
    cfg: &ModelConfig,
    cloud: &PointCloud,
    patches: &PatchSet,
    assignments: &[MaskAssignment],
    weights: &LossWeights,
    supervision: Supervision,
) -> Result<TpmLoss> {
    let branches = assignments
        .iter()
        .map(|a| branch_loss(g, h, cfg, cloud, patches, a, supervision))
        .collect::<Result<Vec<_>>>()?;
    let total = tpm_total_loss(g, &branches, weights)?;
    Ok(TpmLoss { total, branches })
}

/// `[max-pool || mean-pool]` over the encoded visible tokens, `2c` long.
pub fn feature_node<T: Real>(
    g: &mut Graph<T>,
    h: &ParamHandles,
    cfg: &ModelConfig,
    patches: &PatchSet,
    assignment: &MaskAssignment,
) -> Result<NodeId> {
    let x = encode(g, h, cfg, patches, assignment)?;
    let mx = g.max_axis(x, 0)?;
    let mean = g.mean_axis(x, 0)?;
    g.concat(&[mx, mean], 0)
}

/// Patches and mask assignment used when extracting a feature with the
/// given seed.
pub fn feature_inputs(
    cfg: &ModelConfig,
    cloud: &PointCloud,
    mask_ratio: Option<f64>,
    seed: u64,
) -> Result<(PatchSet, MaskAssignment)> {
    let patches = patchify(
        cloud,
        cfg.patch_count,
        cfg.patch_size,
        derive_seed(seed, &[stream::PATCH]),
    )?;
    let assignment = match mask_ratio {
        None => MaskAssignment::all_visible(cfg.patch_count),
        Some(r) => sample_mask(cfg.patch_count, r, derive_seed(seed, &[stream::MASK]))?,
    };
    Ok((patches, assignment))
}

/// Global feature of a normalized cloud. Without a mask ratio every patch is
/// encoded; with one, only the visible patches of a seed-determined
/// assignment are.
pub fn global_feature(
    cloud: &PointCloud,
    params: &ModelParams,
    cfg: &ModelConfig,
    mask_ratio: Option<f64>,
    seed: u64,
) -> Result<GlobalFeature> {
    let (patches, assignment) = feature_inputs(cfg, cloud, mask_ratio, seed)?;
    let mut g = Graph::<f32>::new();
    let h = params.attach_frozen(&mut g)?;
    let f = feature_node(&mut g, &h, cfg, &patches, &assignment)?;
    Ok(GlobalFeature(g.value(f).data().to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::generate_shape;
    use crate::model::init_params;

    fn setup() -> (ModelConfig, ModelParams, PointCloud, PatchSet) {
        let cfg = ModelConfig::desk();
        let params = init_params(&cfg, 1).unwrap();
        let cloud = generate_shape(3, cfg.n_points, 5).unwrap();
        let patches = patchify(&cloud, cfg.patch_count, cfg.patch_size, 2).unwrap();
        (cfg, params, cloud, patches)
    }

    #[test]
    fn reconstruct_shape_and_determinism() {
        let (cfg, params, _, patches) = setup();
        let a = sample_mask(cfg.patch_count, 0.6, 4).unwrap();
        let run = || {
            let mut g = Graph::<f32>::new();
            let h = params.attach(&mut g).unwrap();
            let y = reconstruct(&mut g, &h, &cfg, &patches, &a).unwrap();
            g.value(y).clone()
        };
        let y = run();
        assert_eq!(y.shape(), &[19, 16, 3]);
        assert_eq!(y, run());
    }

    #[test]
    fn visible_token_shape() {
        let (cfg, params, _, patches) = setup();
        let a = sample_mask(cfg.patch_count, 0.4, 4).unwrap();
        let mut g = Graph::<f32>::new();
        let h = params.attach(&mut g).unwrap();
        let (tok, pos) = embed_patches(&mut g, &h, &cfg, &patches, &a).unwrap();
        assert_eq!(g.shape(tok), &[a.visible.len(), cfg.embed_dim]);
        assert_eq!(g.shape(pos), &[cfg.patch_count, cfg.embed_dim]);
    }

    #[test]
    fn bad_partition_is_shape_error() {
        let (cfg, params, _, patches) = setup();
        let a = MaskAssignment {
            masked: vec![0, 1],
            visible: vec![1, 2],
            ratio: 0.5,
        };
        let mut g = Graph::<f32>::new();
        let h = params.attach(&mut g).unwrap();
        assert!(matches!(reconstruct(&mut g, &h, &cfg, &patches, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn feature_length_and_determinism() {
        let (cfg, params, cloud, _) = setup();
        let f = global_feature(&cloud, &params, &cfg, Some(0.6), 9).unwrap();
        assert_eq!(f.0.len(), 2 * cfg.embed_dim);
        assert_eq!(f, global_feature(&cloud, &params, &cfg, Some(0.6), 9).unwrap());
        let full = global_feature(&cloud, &params, &cfg, None, 9).unwrap();
        assert_ne!(f, full);
    }

    #[test]
    fn full_cloud_supervision_runs() {
        let (cfg, params, cloud, patches) = setup();
        let a = sample_mask(cfg.patch_count, 0.6, 4).unwrap();
        let mut g = Graph::<f32>::new();
        let h = params.attach(&mut g).unwrap();
        let l = branch_loss(&mut g, &h, &cfg, &cloud, &patches, &a, Supervision::FullCloud).unwrap();
        assert!(g.value(l).item() > 0.0);
        g.backward(l).unwrap();
    }
}
