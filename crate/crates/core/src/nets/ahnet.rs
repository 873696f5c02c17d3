//! Hybrid 3D network: transferred encoder, anisotropic dense decoder with
//! summation skips, and pyramid volumetric pooling.

use super::backbone::{build_encoder, Geometry};
use super::builder::GraphBuilder;
use super::config::NetConfig;
use super::graph::{ModelGraph, Part};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, PoolSpec};

fn pointwise(i: usize, o: usize) -> Result<ConvSpec> {
    ConvSpec::same(i, o, &[1, 1, 1])
}

/// xy bottleneck `1×1×1 → 3×3×1 → 1×1×1` giving `h`, then a z bottleneck
/// `1×1×1 → 1×1×3 → 1×1×1` on `h` summed back onto it: `relu(h + z(h))`.
pub fn anisotropic_block(b: &mut GraphBuilder, p: &str, x: usize, mid: usize, out: usize) -> Result<usize> {
    let c = b.channels(x);
    let h = b.conv_bn_relu(&format!("{p}.xy.reduce"), x, pointwise(c, mid)?)?;
    let h = b.conv_bn_relu(&format!("{p}.xy.conv"), h, ConvSpec::same(mid, mid, &[3, 3, 1])?)?;
    let h = b.conv_bn_relu(&format!("{p}.xy.expand"), h, pointwise(mid, out)?)?;
    let z = b.conv_bn_relu(&format!("{p}.z.reduce"), h, pointwise(out, mid)?)?;
    let z = b.conv_bn_relu(&format!("{p}.z.conv"), z, ConvSpec::same(mid, mid, &[1, 1, 3])?)?;
    let z = b.conv(&format!("{p}.z.expand.conv"), z, pointwise(mid, out)?, false)?;
    let z = b.bn(&format!("{p}.z.expand.bn"), z)?;
    let s = b.add(&format!("{p}.add"), h, z)?;
    b.relu(&format!("{p}.relu"), s)
}

/// Block `j` sees the concatenation of the input and blocks `0..j`; the
/// result concatenates all of them.
pub fn dense_block(b: &mut GraphBuilder, p: &str, x: usize, blocks: usize, growth: usize) -> Result<usize> {
    let mut feats = vec![x];
    for j in 0..blocks {
        let inp = if j == 0 {
            x
        } else {
            b.concat(&format!("{p}.cat{j}"), &feats)?
        };
        let y = anisotropic_block(b, &format!("{p}.block{j}"), inp, growth, growth)?;
        feats.push(y);
    }
    b.concat(&format!("{p}.out"), &feats)
}

/// `K×K×1` max pools (stride = window), each projected to one channel,
/// resized back, concatenated with the input, then projected to `out`.
pub fn pyramid_pooling(b: &mut GraphBuilder, p: &str, x: usize, pools: &[usize], out: usize) -> Result<usize> {
    let c = b.channels(x);
    let sp = b.shape(x)[2..].to_vec();
    let mut feats = vec![x];
    for (i, &k) in pools.iter().enumerate() {
        if k > sp[0] || k > sp[1] {
            return Err(Error::Layer {
                layer: format!("{p}.pool{i}"),
                message: format!("pool extent {k} exceeds feature extents {sp:?}"),
            });
        }
        let m = b.maxpool(&format!("{p}.pool{i}"), x, PoolSpec::new(&[k, k, 1], &[k, k, 1])?)?;
        let m = b.conv(&format!("{p}.proj{i}"), m, pointwise(c, 1)?, true)?;
        feats.push(b.upsample_like(&format!("{p}.up{i}"), m, x)?);
    }
    let cat = b.concat(&format!("{p}.concat"), &feats)?;
    let cc = b.channels(cat);
    b.conv(&format!("{p}.out"), cat, pointwise(cc, out)?, true)
}

/// Builds the hybrid network. Tensors in `transferred` overwrite the random
/// initialization; the names left random are returned.
pub fn build_ahnet(cfg: &NetConfig, seed: u64, transferred: Option<&Checkpoint>) -> Result<(ModelGraph, Vec<String>)> {
    cfg.validate()?;
    let mut b = GraphBuilder::new(seed);
    let x = b.input(&cfg.input_shape_3d())?;
    let taps = build_encoder(&mut b, cfg, x, &Geometry::Hybrid(cfg.z_pooling.clone()))?;
    b.part = Part::Decoder;
    let mut skips = vec![taps.stem];
    skips.extend(&taps.stages);
    let g = cfg.decoder_width;
    let mut h = *skips.last().unwrap();
    for i in (1..skips.len()).rev() {
        let p = format!("decoder.level{i}");
        let d = dense_block(&mut b, &format!("{p}.dense"), h, cfg.dense_blocks, g)?;
        let (dc, sc) = (b.channels(d), b.channels(skips[i - 1]));
        let pr = b.conv(&format!("{p}.proj"), d, pointwise(dc, sc)?, true)?;
        let u = b.upsample_like(&format!("{p}.up"), pr, skips[i - 1])?;
        h = b.add(&format!("{p}.sum"), u, skips[i - 1])?;
    }
    let h = b.relu("decoder.head.relu", h)?;
    let h = b.upsample_like("decoder.head.up", h, taps.input)?;
    let out = pyramid_pooling(&mut b, "decoder.pyramid", h, &cfg.pyramid_pools, cfg.out_channels)?;
    let mut graph = b.finish(out);
    let mut random: Vec<String> = graph.params.iter().map(|(n, _)| n.clone()).collect();
    if let Some(ck) = transferred {
        for (name, t) in ck.tensors() {
            graph.params.assign(name, t.clone()).map_err(|e| {
                Error::Transfer(format!("checkpoint does not match the configuration: {e}"))
            })?;
        }
        random.retain(|n| !ck.tensors().contains_key(n));
    }
    Ok((graph, random))
}
