use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// A scored peak in voxel coordinates `(x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub pos: [usize; 3],
    pub score: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NmsConfig {
    pub threshold: f32,
    /// Ellipsoid semi-axes in voxels; a maximum within it of a kept one is dropped.
    pub radius: [f64; 3],
}

impl Default for NmsConfig {
    fn default() -> Self {
        NmsConfig {
            threshold: f32::NEG_INFINITY,
            radius: [5.0, 5.0, 2.0],
        }
    }
}

impl NmsConfig {
    /// Radius given in millimetres, converted with the voxel spacing.
    pub fn with_radius_mm(threshold: f32, radius_mm: [f64; 3], spacing: [f64; 3]) -> Self {
        NmsConfig {
            threshold,
            radius: [
                radius_mm[0] / spacing[0],
                radius_mm[1] / spacing[1],
                radius_mm[2] / spacing[2],
            ],
        }
    }
}

fn dims3(response: &Tensor) -> Result<[usize; 3]> {
    match response.shape() {
        [x, y, z] => Ok([*x, *y, *z]),
        [1, 1, x, y, z] => Ok([*x, *y, *z]),
        s => shape_err(format!("maxima extraction needs a 3D response, got {s:?}")),
    }
}

fn within(a: [usize; 3], b: [usize; 3], r: [f64; 3]) -> bool {
    let mut q = 0.0;
    for k in 0..3 {
        let d = a[k] as f64 - b[k] as f64;
        if r[k] <= 0.0 {
            if d != 0.0 {
                return false;
            }
        } else {
            q += (d / r[k]) * (d / r[k]);
        }
    }
    q <= 1.0
}

/// Strict 26-neighbourhood maxima at or above the threshold, then greedy
/// suppression in descending score order (ties broken by coordinate).
pub fn extract_maxima(response: &Tensor, cfg: &NmsConfig) -> Result<Vec<Finding>> {
    let [nx, ny, nz] = dims3(response)?;
    let v = response.data();
    let at = |x: usize, y: usize, z: usize| v[(x * ny + y) * nz + z];
    let mut cands = Vec::new();
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let c = at(x, y, z);
                if !(c >= cfg.threshold) || !c.is_finite() {
                    continue;
                }
                let mut strict = true;
                'nb: for dx in -1i64..=1 {
                    for dy in -1i64..=1 {
                        for dz in -1i64..=1 {
                            if dx == 0 && dy == 0 && dz == 0 {
                                continue;
                            }
                            let (qx, qy, qz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                            if qx < 0 || qy < 0 || qz < 0 || qx >= nx as i64 || qy >= ny as i64 || qz >= nz as i64 {
                                continue;
                            }
                            if at(qx as usize, qy as usize, qz as usize) >= c {
                                strict = false;
                                break 'nb;
                            }
                        }
                    }
                }
                if strict {
                    cands.push(Finding {
                        pos: [x, y, z],
                        score: c,
                    });
                }
            }
        }
    }
    cands.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.pos.cmp(&b.pos)));
    let mut kept: Vec<Finding> = Vec::new();
    for f in cands {
        if kept.iter().all(|k| !within(k.pos, f.pos, cfg.radius)) {
            kept.push(f);
        }
    }
    Ok(kept)
}
