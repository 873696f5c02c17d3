//! Layer-level rewrites from the 2D encoder to its hybrid 3D counterpart.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, PoolSpec};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DownsampleOp {
    Conv(ConvSpec),
    MaxPool(PoolSpec),
}

/// `MaxPool 1×1×2 / (1,1,2)`, or its identity when z-pooling is off.
pub fn z_pool(enabled: bool) -> PoolSpec {
    let z = if enabled { 2 } else { 1 };
    PoolSpec::new(&[1, 1, z], &[1, 1, z]).expect("valid z pool")
}

/// A 2D conv with a trailing unit depth axis: `k×k/s` becomes `k×k×1/(s,s,1)`.
pub fn lift_conv(spec: &ConvSpec) -> Result<ConvSpec> {
    if spec.spatial_rank() != 2 {
        return Err(Error::Transfer(format!("lift of a non-2D conv {spec:?}")));
    }
    let mut k = spec.kernel.clone();
    let mut s = spec.stride.clone();
    let mut p = spec.pad.clone();
    k.push(1);
    s.push(1);
    p.push(0);
    ConvSpec::new(spec.in_channels, spec.out_channels, &k, &s, &p)
}

fn is_projection(c: &ConvSpec) -> bool {
    c.spatial_rank() == 2 && c.kernel == [1, 1] && c.stride == [2, 2] && c.pad == [0, 0]
}

fn is_stem(c: &ConvSpec, p: &PoolSpec) -> bool {
    c.spatial_rank() == 2
        && c.in_channels == 3
        && c.stride == [2, 2]
        && c.kernel[0] == c.kernel[1]
        && p.kernel.len() == 2
        && p.stride == [2, 2]
}

/// Rewrites a 2D downsampling site.
///
/// * stem `[Conv k×k/2 (3 channels), MaxPool q×q/2]` becomes
///   `[Conv k×k×3/(2,2,1), MaxPool 1×1×2/(1,1,2), MaxPool q×q×3/(2,2,2)]`;
/// * a block boundary `[Conv 1×1/(2,2)]` becomes
///   `[Conv 1×1×1/(2,2,1), MaxPool 1×1×2/(1,1,2)]`.
///
/// `z_pool` holds one flag per emitted z-pooling site; a disabled site emits
/// the identity window (stem pool: `q×q×1/(2,2,1)`).
pub fn rewrite_downsample(src: &[DownsampleOp], z_pool_flags: &[bool]) -> Result<Vec<DownsampleOp>> {
    match src {
        [DownsampleOp::Conv(c), DownsampleOp::MaxPool(p)] if is_stem(c, p) => {
            let [zs, zp] = match z_pool_flags {
                [a, b] => [*a, *b],
                _ => return Err(Error::Transfer("stem rewrite needs two z-pool flags".into())),
            };
            let conv = ConvSpec::new(
                1,
                c.out_channels,
                &[c.kernel[0], c.kernel[1], 3],
                &[2, 2, 1],
                &[c.pad[0], c.pad[1], 1],
            )?;
            let (kz, sz, pz) = if zp { (3, 2, 1) } else { (1, 1, 0) };
            let pool = PoolSpec::with_pad(
                &[p.kernel[0], p.kernel[1], kz],
                &[p.stride[0], p.stride[1], sz],
                &[p.pad[0], p.pad[1], pz],
            )?;
            Ok(vec![
                DownsampleOp::Conv(conv),
                DownsampleOp::MaxPool(z_pool(zs)),
                DownsampleOp::MaxPool(pool),
            ])
        }
        [DownsampleOp::Conv(c)] if is_projection(c) => {
            let z = match z_pool_flags {
                [z] => *z,
                _ => return Err(Error::Transfer("boundary rewrite needs one z-pool flag".into())),
            };
            let conv = ConvSpec::new(c.in_channels, c.out_channels, &[1, 1, 1], &[2, 2, 1], &[0, 0, 0])?;
            Ok(vec![DownsampleOp::Conv(conv), DownsampleOp::MaxPool(z_pool(z))])
        }
        other => Err(Error::Transfer(format!(
            "not a downsampling boundary: {other:?}"
        ))),
    }
}
