//! Point-MAE style masked autoencoder: patch embedding, transformer
//! encoder over visible tokens, and a light decoder that predicts masked
//! patches.

mod config;
pub(crate) mod init;
mod network;

pub use config::ModelConfig;
pub use init::{
    check_compatible, init_params, is_decoder_param, is_encoder_param, param_shapes, parameter_count, ModelParams,
    INIT_STD,
};
pub use network::{
    branch_loss, embed_patches, encode, feature_inputs, feature_node, global_feature, reconstruct, tpm_objective,
    GlobalFeature, Supervision, TpmLoss,
};
