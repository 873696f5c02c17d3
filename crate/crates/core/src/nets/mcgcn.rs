//! 2D multi-channel encoder-decoder with global convolution and refinement
//! modules at every resolution.

use super::backbone::{build_encoder, Geometry};
use super::builder::GraphBuilder;
use super::config::NetConfig;
use super::graph::{ModelGraph, Part};
use crate::error::{Error, Result};
use crate::tensor::ConvSpec;

/// Large `K×K` kernel approximated by `(1×K → K×1) + (K×1 → 1×K)`.
pub fn gcn_module(b: &mut GraphBuilder, p: &str, x: usize, k: usize, out: usize) -> Result<usize> {
    if k % 2 == 0 || k == 0 {
        return Err(Error::InvalidSpec(format!("GCN kernel must be odd, got {k}")));
    }
    let c = b.channels(x);
    let row = |i, o| ConvSpec::new(i, o, &[1, k], &[1, 1], &[0, k / 2]);
    let col = |i, o| ConvSpec::new(i, o, &[k, 1], &[1, 1], &[k / 2, 0]);
    let l = b.conv(&format!("{p}.left.conv1"), x, row(c, out)?, true)?;
    let l = b.conv(&format!("{p}.left.conv2"), l, col(out, out)?, true)?;
    let r = b.conv(&format!("{p}.right.conv1"), x, col(c, out)?, true)?;
    let r = b.conv(&format!("{p}.right.conv2"), r, row(out, out)?, true)?;
    b.add(&format!("{p}.sum"), l, r)
}

/// `x + conv3×3(relu(conv3×3(x)))`.
pub fn refinement_block(b: &mut GraphBuilder, p: &str, x: usize) -> Result<usize> {
    let c = b.channels(x);
    let h = b.conv_same(&format!("{p}.conv1"), x, c, &[3, 3], true)?;
    let h = b.relu(&format!("{p}.relu"), h)?;
    let h = b.conv_same(&format!("{p}.conv2"), h, c, &[3, 3], true)?;
    b.add(&format!("{p}.add"), x, h)
}

/// Levels run from the input image (level 0) to the deepest stage. Each
/// level's GCN + refinement output is summed with the upsampled level below.
pub fn build_mcgcn(cfg: &NetConfig, seed: u64) -> Result<ModelGraph> {
    cfg.validate()?;
    let mut b = GraphBuilder::new(seed);
    let x = b.input(&cfg.input_shape_2d())?;
    let taps = build_encoder(&mut b, cfg, x, &Geometry::Planar)?;
    let mut levels = vec![taps.input, taps.stem];
    levels.extend(&taps.stages);
    if levels.len() != cfg.gcn_kernels.len() {
        return Err(Error::Config(format!(
            "{} GCN kernels for {} taps",
            cfg.gcn_kernels.len(),
            levels.len()
        )));
    }
    b.part = Part::Decoder;
    let o = cfg.out_channels;
    let mut below: Option<usize> = None;
    for i in (0..levels.len()).rev() {
        let p = format!("decoder.level{i}");
        let g = gcn_module(&mut b, &format!("{p}.gcn"), levels[i], cfg.gcn_kernels[i], o)?;
        let mut h = refinement_block(&mut b, &format!("{p}.refine"), g)?;
        if let Some(u) = below {
            h = b.add(&format!("{p}.sum"), h, u)?;
        }
        if i > 0 {
            let c = b.conv_same(&format!("{p}.up.conv"), h, o, &[1, 1], true)?;
            below = Some(b.upsample_like(&format!("{p}.up"), c, levels[i - 1])?);
        } else {
            below = Some(h);
        }
    }
    let out = below.expect("at least one level");
    Ok(b.finish(out))
}
