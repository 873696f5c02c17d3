//! Carrying a trained 2D encoder into the hybrid 3D network.

pub mod rewrite;
pub mod rules;
pub mod transforms;
pub mod validate;

pub use rewrite::{lift_conv, rewrite_downsample, DownsampleOp};
pub use rules::{
    apply_overrides, audit_transfer, auto_rules, load_overrides, transfer_encoder, LayerResidual, RuleKind,
    TransferReport, TransferRule,
};
pub use transforms::{append_depth, inverse_input_layer, strip_depth, transform_input_layer};
pub use validate::{slice_residuals, slice_triples, validate_slice_equivalence};

use crate::error::Result;
use crate::nets::{build_ahnet, build_mcgcn, ModelGraph, NetConfig, ZPooling};

/// Hybrid network whose encoder is transferred from `mcgcn`, built with
/// z-pooling disabled so every encoder layer keeps the input depth.
pub fn equivalence_pair_3d(cfg: &NetConfig, mcgcn: &ModelGraph, seed: u64) -> Result<ModelGraph> {
    let mut flat = cfg.clone();
    flat.z_pooling = ZPooling::disabled(cfg.stages());
    let ck = crate::checkpoint::Checkpoint::from_store(&mcgcn.params);
    let (ck3, _) = transfer_encoder(&ck, &auto_rules(mcgcn))?;
    Ok(build_ahnet(&flat, seed, Some(&ck3))?.0)
}

/// Fresh random 2D network plus its transferred, z-pool-free 3D counterpart.
pub fn random_pair(cfg: &NetConfig, seed: u64) -> Result<(ModelGraph, ModelGraph)> {
    let g2 = build_mcgcn(cfg, seed)?;
    let g3 = equivalence_pair_3d(cfg, &g2, seed.wrapping_add(1))?;
    Ok((g2, g3))
}
