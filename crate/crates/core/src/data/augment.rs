//! Random in-plane rotation, per-axis scaling and in-plane mirroring applied
//! identically to a patch and its target.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Rotation drawn from `±max_rotation_deg` about z.
    pub max_rotation_deg: f64,
    /// Per-axis scale drawn from `1 ± max_scale`.
    pub max_scale: f64,
    /// Mirror along x with probability one half.
    pub mirror: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            max_rotation_deg: 20.0,
            max_scale: 0.2,
            mirror: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub rotation_deg: f64,
    pub scale: [f64; 3],
    pub mirror: bool,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            rotation_deg: 0.0,
            scale: [1.0; 3],
            mirror: false,
        }
    }

    /// Draws parameters; `planar` patches keep unit depth scale.
    pub fn sample(cfg: &AugmentConfig, planar: bool, rng: &mut impl Rng) -> Self {
        let rotation_deg = rng.gen_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg);
        let mut scale = [0.0; 3];
        for s in &mut scale {
            *s = 1.0 + rng.gen_range(-cfg.max_scale..=cfg.max_scale);
        }
        if planar {
            scale[2] = 1.0;
        }
        let mirror = cfg.mirror && rng.gen_bool(0.5);
        AugmentParams {
            rotation_deg,
            scale,
            mirror,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interp {
    Linear,
    Nearest,
}

/// `[C, X, Y]` or `[C, X, Y, Z]` viewed as `(C, [X, Y, Z])`.
fn grid(t: &Tensor) -> Result<(usize, [usize; 3])> {
    match *t.shape() {
        [c, x, y] => Ok((c, [x, y, 1])),
        [c, x, y, z] => Ok((c, [x, y, z])),
        ref s => shape_err(format!("augment expects [C,X,Y] or [C,X,Y,Z], got {s:?}")),
    }
}

/// Source coordinate of each output voxel under the inverse transform.
fn source_coords(d: [usize; 3], p: &AugmentParams) -> Vec<[f64; 3]> {
    let c = d.map(|v| (v as f64 - 1.0) / 2.0);
    let (sin, cos) = (-p.rotation_deg.to_radians()).sin_cos();
    let mut out = Vec::with_capacity(d.iter().product());
    for x in 0..d[0] {
        for y in 0..d[1] {
            for z in 0..d[2] {
                let u = [x as f64 - c[0], y as f64 - c[1], z as f64 - c[2]];
                let r = [cos * u[0] - sin * u[1], sin * u[0] + cos * u[1], u[2]];
                let mut s = [r[0] / p.scale[0], r[1] / p.scale[1], r[2] / p.scale[2]];
                if p.mirror {
                    s[0] = -s[0];
                }
                out.push([s[0] + c[0], s[1] + c[1], s[2] + c[2]]);
            }
        }
    }
    out
}

fn sample_linear(v: &[f32], d: [usize; 3], q: [f64; 3]) -> f32 {
    let mut i0 = [0usize; 3];
    let mut i1 = [0usize; 3];
    let mut f = [0f32; 3];
    for a in 0..3 {
        let x = q[a].clamp(0.0, (d[a] - 1) as f64);
        let fl = x.floor();
        i0[a] = fl as usize;
        i1[a] = (i0[a] + 1).min(d[a] - 1);
        f[a] = (x - fl) as f32;
    }
    let at = |x: usize, y: usize, z: usize| v[(x * d[1] + y) * d[2] + z];
    let lerp = |a: f32, b: f32, t: f32| if t == 0.0 { a } else { a + (b - a) * t };
    let c00 = lerp(at(i0[0], i0[1], i0[2]), at(i1[0], i0[1], i0[2]), f[0]);
    let c10 = lerp(at(i0[0], i1[1], i0[2]), at(i1[0], i1[1], i0[2]), f[0]);
    let c01 = lerp(at(i0[0], i0[1], i1[2]), at(i1[0], i0[1], i1[2]), f[0]);
    let c11 = lerp(at(i0[0], i1[1], i1[2]), at(i1[0], i1[1], i1[2]), f[0]);
    lerp(lerp(c00, c10, f[1]), lerp(c01, c11, f[1]), f[2])
}

fn sample_nearest(v: &[f32], d: [usize; 3], q: [f64; 3]) -> f32 {
    let i = [0, 1, 2].map(|a| (q[a].clamp(0.0, (d[a] - 1) as f64) + 0.5).floor() as usize);
    v[(i[0] * d[1] + i[1]) * d[2] + i[2]]
}

fn resample(t: &Tensor, coords: &[[f64; 3]], interp: Interp) -> Result<Tensor> {
    let (c, d) = grid(t)?;
    let n = d.iter().product::<usize>();
    let mut out = Vec::with_capacity(t.len());
    for ch in 0..c {
        let v = &t.data()[ch * n..(ch + 1) * n];
        for &q in coords {
            out.push(match interp {
                Interp::Linear => sample_linear(v, d, q),
                Interp::Nearest => sample_nearest(v, d, q),
            });
        }
    }
    Tensor::from_vec(t.shape().to_vec(), out)
}

/// Applies `params` to the image (linear) and the target (`target_interp`).
pub fn augment(image: &Tensor, target: &Tensor, target_interp: Interp, params: &AugmentParams) -> Result<(Tensor, Tensor)> {
    let (_, d) = grid(image)?;
    let (_, dt) = grid(target)?;
    if d != dt {
        return shape_err(format!("image {:?} and target {:?} grids differ", image.shape(), target.shape()));
    }
    let coords = source_coords(d, params);
    Ok((resample(image, &coords, Interp::Linear)?, resample(target, &coords, target_interp)?))
}
