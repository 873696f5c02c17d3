//! Residual bottleneck encoder, built either flat (2D) or hybrid (3D, depth-1
//! kernels plus z-pooling) from the same code path so both share layer names.

use super::builder::GraphBuilder;
use super::config::{NetConfig, ZPooling};
use crate::error::Result;
use crate::tensor::{ConvSpec, PoolSpec};
use crate::transfer::rewrite::{lift_conv, rewrite_downsample, DownsampleOp};

#[derive(Clone, Debug, PartialEq)]
pub enum Geometry {
    Planar,
    Hybrid(ZPooling),
}

/// Layer ids of the feature taps.
#[derive(Clone, Debug)]
pub struct EncoderTaps {
    pub input: usize,
    /// Stem features after conv, bn and relu (half resolution).
    pub stem: usize,
    pub stages: Vec<usize>,
}

pub const STEM_KERNEL: usize = 7;

pub fn stem_conv_2d(width: usize) -> ConvSpec {
    ConvSpec::new(3, width, &[STEM_KERNEL, STEM_KERNEL], &[2, 2], &[3, 3]).expect("valid stem")
}

pub fn stem_pool_2d() -> PoolSpec {
    PoolSpec::with_pad(&[3, 3], &[2, 2], &[1, 1]).expect("valid stem pool")
}

fn expect_conv(op: &DownsampleOp) -> ConvSpec {
    match op {
        DownsampleOp::Conv(c) => c.clone(),
        DownsampleOp::MaxPool(_) => unreachable!("rewrite emits the conv first"),
    }
}

fn expect_pool(op: &DownsampleOp) -> PoolSpec {
    match op {
        DownsampleOp::MaxPool(p) => p.clone(),
        DownsampleOp::Conv(_) => unreachable!("rewrite emits pools after the conv"),
    }
}

/// Conv spec in the requested geometry; strided 1×1 projections are
/// rewritten and return the z-pool to apply after them.
fn place_conv(geo: &Geometry, spec2d: ConvSpec, z_flag: bool) -> Result<(ConvSpec, Option<PoolSpec>)> {
    match geo {
        Geometry::Planar => Ok((spec2d, None)),
        Geometry::Hybrid(_) if spec2d.stride == [2, 2] => {
            let ops = rewrite_downsample(&[DownsampleOp::Conv(spec2d)], &[z_flag])?;
            Ok((expect_conv(&ops[0]), Some(expect_pool(&ops[1]))))
        }
        Geometry::Hybrid(_) => Ok((lift_conv(&spec2d)?, None)),
    }
}

fn conv_maybe_pooled(
    b: &mut GraphBuilder,
    name: &str,
    pool_name: &str,
    x: usize,
    geo: &Geometry,
    spec2d: ConvSpec,
    z_flag: bool,
) -> Result<usize> {
    let (spec, pool) = place_conv(geo, spec2d, z_flag)?;
    let c = b.conv(name, x, spec, false)?;
    match pool {
        Some(p) => b.maxpool(pool_name, c, p),
        None => Ok(c),
    }
}

fn bottleneck(
    b: &mut GraphBuilder,
    p: &str,
    x: usize,
    out: usize,
    stride: usize,
    geo: &Geometry,
    z_flag: bool,
) -> Result<usize> {
    let cin = b.channels(x);
    let mid = out / 4;
    let s = [stride, stride];
    let c1 = conv_maybe_pooled(
        b,
        &format!("{p}.conv1"),
        &format!("{p}.zpool"),
        x,
        geo,
        ConvSpec::new(cin, mid, &[1, 1], &s, &[0, 0])?,
        z_flag,
    )?;
    let h = b.bn(&format!("{p}.bn1"), c1)?;
    let h = b.relu(&format!("{p}.relu1"), h)?;
    let (spec2, _) = place_conv(geo, ConvSpec::same(mid, mid, &[3, 3])?, false)?;
    let h = b.conv(&format!("{p}.conv2"), h, spec2, false)?;
    let h = b.bn(&format!("{p}.bn2"), h)?;
    let h = b.relu(&format!("{p}.relu2"), h)?;
    let (spec3, _) = place_conv(geo, ConvSpec::same(mid, out, &[1, 1])?, false)?;
    let h = b.conv(&format!("{p}.conv3"), h, spec3, false)?;
    let h = b.bn(&format!("{p}.bn3"), h)?;
    let shortcut = if stride != 1 || cin != out {
        let d = conv_maybe_pooled(
            b,
            &format!("{p}.downsample.conv"),
            &format!("{p}.downsample.zpool"),
            x,
            geo,
            ConvSpec::new(cin, out, &[1, 1], &s, &[0, 0])?,
            z_flag,
        )?;
        b.bn(&format!("{p}.downsample.bn"), d)?
    } else {
        x
    };
    let y = b.add(&format!("{p}.add"), h, shortcut)?;
    b.relu(&format!("{p}.relu"), y)
}

/// Stem and residual stages on top of layer `x`.
pub fn build_encoder(b: &mut GraphBuilder, cfg: &NetConfig, x: usize, geo: &Geometry) -> Result<EncoderTaps> {
    cfg.validate()?;
    let conv2d = stem_conv_2d(cfg.stem_width);
    let pool2d = stem_pool_2d();
    let (stem_conv, pools) = match geo {
        Geometry::Planar => (conv2d, vec![("encoder.stem.pool", pool2d)]),
        Geometry::Hybrid(z) => {
            let ops = rewrite_downsample(
                &[DownsampleOp::Conv(conv2d), DownsampleOp::MaxPool(pool2d)],
                &[z.stem, z.stem_pool],
            )?;
            (
                expect_conv(&ops[0]),
                vec![
                    ("encoder.stem.zpool", expect_pool(&ops[1])),
                    ("encoder.stem.pool", expect_pool(&ops[2])),
                ],
            )
        }
    };
    let h = b.conv("encoder.stem.conv", x, stem_conv, false)?;
    let h = b.bn("encoder.stem.bn", h)?;
    let stem = b.relu("encoder.stem.relu", h)?;
    b.tap("stem", stem);
    let mut h = stem;
    for (name, p) in pools {
        h = b.maxpool(name, h, p)?;
    }
    let mut stages = Vec::new();
    for (s, (&width, &n)) in cfg.stage_widths.iter().zip(&cfg.blocks).enumerate() {
        let z_flag = match geo {
            Geometry::Hybrid(z) if s > 0 => z.boundaries[s - 1],
            _ => false,
        };
        for blk in 0..n {
            let stride = if s > 0 && blk == 0 { 2 } else { 1 };
            h = bottleneck(b, &format!("encoder.layer{}.{blk}", s + 1), h, width, stride, geo, z_flag)?;
        }
        b.tap(&format!("layer{}", s + 1), h);
        stages.push(h);
    }
    Ok(EncoderTaps {
        input: x,
        stem,
        stages,
    })
}
