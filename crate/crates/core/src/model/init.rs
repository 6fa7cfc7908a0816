use rand_distr::{Distribution, StandardNormal};

use super::config::ModelConfig;
use crate::autodiff::{ParamStore, Tensor};
use crate::error::Result;
use crate::rng::{rng_for, stream};

pub type ModelParams = ParamStore<f32>;

pub const INIT_STD: f64 = 0.02;

fn linear(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, fan_in: usize, fan_out: usize) {
    out.push((format!("{prefix}.w"), vec![fan_in, fan_out]));
    out.push((format!("{prefix}.b"), vec![fan_out]));
}

fn norm(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, width: usize) {
    out.push((format!("{prefix}.g"), vec![width]));
    out.push((format!("{prefix}.b"), vec![width]));
}

fn block(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, cfg: &ModelConfig) {
    let c = cfg.embed_dim;
    norm(out, &format!("{prefix}.ln1"), c);
    linear(out, &format!("{prefix}.attn.qkv"), c, 3 * c);
    linear(out, &format!("{prefix}.attn.proj"), c, c);
    norm(out, &format!("{prefix}.ln2"), c);
    linear(out, &format!("{prefix}.mlp.fc1"), c, cfg.mlp_hidden());
    linear(out, &format!("{prefix}.mlp.fc2"), cfg.mlp_hidden(), c);
}

/// Names and shapes of every encoder and decoder tensor.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let c = cfg.embed_dim;
    let mut out = Vec::new();
    linear(&mut out, "embed.point1", 3, cfg.point_hidden());
    norm(&mut out, "embed.norm1", cfg.point_hidden());
    linear(&mut out, "embed.point2", cfg.point_hidden(), c);
    linear(&mut out, "embed.patch1", c, c);
    norm(&mut out, "embed.norm2", c);
    linear(&mut out, "embed.patch2", c, c);
    linear(&mut out, "pos.fc1", 3, c);
    linear(&mut out, "pos.fc2", c, c);
    for i in 0..cfg.encoder_depth {
        block(&mut out, &format!("enc.{i}"), cfg);
    }
    norm(&mut out, "enc.norm", c);
    linear(&mut out, "dec.pos.fc1", 3, c);
    linear(&mut out, "dec.pos.fc2", c, c);
    for i in 0..cfg.decoder_depth {
        block(&mut out, &format!("dec.{i}"), cfg);
    }
    norm(&mut out, "dec.norm", c);
    linear(&mut out, "dec.head", c, cfg.patch_size * 3);
    out.push(("mask_token".into(), vec![1, c]));
    out
}

pub fn parameter_count(cfg: &ModelConfig) -> usize {
    param_shapes(cfg)
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

/// Tensors belonging to the encoder (patch embedding, positions, blocks).
pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with("embed.") || name.starts_with("pos.") || name.starts_with("enc.")
}

pub fn is_decoder_param(name: &str) -> bool {
    name.starts_with("dec.") || name == "mask_token"
}

pub(crate) fn truncated_normal(len: usize, std: f64, seed: u64, tag: u64) -> Vec<f32> {
    let mut rng = rng_for(seed, &[stream::INIT, tag]);
    (0..len)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(&mut rng);
            if z.abs() <= 2.0 {
                break (z * std) as f32;
            }
        })
        .collect()
}

pub(crate) fn init_tensor(name: &str, shape: &[usize], seed: u64, tag: u64) -> Result<Tensor<f32>> {
    let numel: usize = shape.iter().product();
    let data = if name.ends_with(".g") {
        vec![1.0; numel]
    } else if name.ends_with(".b") {
        vec![0.0; numel]
    } else {
        truncated_normal(numel, INIT_STD, seed, tag)
    };
    Tensor::new(shape.to_vec(), data)
}

/// Truncated-normal weights (std 0.02, clipped at two std), zero biases,
/// unit norm gains.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut store = ModelParams::new();
    for (i, (name, shape)) in param_shapes(cfg).into_iter().enumerate() {
        let t = init_tensor(&name, &shape, seed, i as u64)?;
        store.insert(name, t)?;
    }
    Ok(store)
}

/// Check that `params` holds exactly the tensors `cfg` describes.
pub fn check_compatible(cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    for (name, shape) in param_shapes(cfg) {
        match params.get(&name) {
            None => {
                return Err(crate::Error::Compatibility(format!("missing tensor `{name}`")));
            }
            Some(t) if t.shape() != shape.as_slice() => {
                return Err(crate::Error::Compatibility(format!(
                    "tensor `{name}` has shape {:?}, config expects {shape:?}",
                    t.shape()
                )));
            }
            _ => {}
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::desk();
        assert_eq!(init_params(&cfg, 1).unwrap(), init_params(&cfg, 1).unwrap());
        assert_ne!(init_params(&cfg, 1).unwrap(), init_params(&cfg, 2).unwrap());
    }

    #[test]
    fn weights_are_clipped() {
        let p = init_params(&ModelConfig::desk(), 3).unwrap();
        let w = p.get("enc.0.attn.qkv.w").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= 0.04 + 1e-7));
        assert!(p.get("enc.0.attn.qkv.b").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(p.get("enc.norm.g").unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn count_matches_store() {
        let cfg = ModelConfig::desk();
        assert_eq!(init_params(&cfg, 0).unwrap().numel(), parameter_count(&cfg));
        // the full-size config is only counted, not allocated
        assert!(parameter_count(&ModelConfig::point_mae()) > 20_000_000);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = ModelConfig {
            head_count: 3,
            ..ModelConfig::desk()
        };
        assert!(init_params(&cfg, 0).is_err());
    }
}
