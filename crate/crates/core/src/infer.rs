//! Whole-volume inference: overlapping 3D tiles averaged uniformly, or the 2D
//! network applied to every slice triple.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nets::ModelGraph;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TilingConfig {
    pub tile: [usize; 3],
    pub overlap: [usize; 3],
    /// Voxels added on each side of every axis by repeating the border
    /// before tiling, so edge voxels get context; cropped off afterwards.
    pub margin: [usize; 3],
}

impl Default for TilingConfig {
    fn default() -> Self {
        TilingConfig {
            tile: [64, 64, 8],
            overlap: [32, 32, 4],
            margin: [8, 8, 2],
        }
    }
}

/// Tile start offsets along one axis; the last tile is flush with the end.
fn starts(extent: usize, tile: usize, overlap: usize) -> Vec<usize> {
    if tile >= extent {
        return vec![0];
    }
    let step = tile - overlap;
    let mut s: Vec<usize> = (0..).map(|i| i * step).take_while(|&o| o + tile < extent).collect();
    s.push(extent - tile);
    s
}

fn as_grid(volume: &Tensor) -> Result<[usize; 3]> {
    match *volume.shape() {
        [x, y, z] | [1, 1, x, y, z] => Ok([x, y, z]),
        ref s => shape_err(format!("expected an X×Y×Z volume, got {s:?}")),
    }
}

/// Edge-replicated copy of an `[X, Y, Z]` volume grown by `m` on each side.
pub fn pad_edges(volume: &Tensor, m: [usize; 3]) -> Result<Tensor> {
    let d = as_grid(volume)?;
    let p = [0, 1, 2].map(|a| d[a] + 2 * m[a]);
    let src = volume.data();
    let clamp = |i: usize, a: usize| i.saturating_sub(m[a]).min(d[a] - 1);
    let mut out = Vec::with_capacity(p.iter().product());
    for x in 0..p[0] {
        for y in 0..p[1] {
            let row = (clamp(x, 0) * d[1] + clamp(y, 1)) * d[2];
            out.extend((0..p[2]).map(|z| src[row + clamp(z, 2)]));
        }
    }
    Tensor::from_vec(p.to_vec(), out)
}

fn crop(t: &Tensor, m: [usize; 3], d: [usize; 3]) -> Result<Tensor> {
    let s = t.shape();
    let mut out = Vec::with_capacity(d.iter().product());
    for x in 0..d[0] {
        for y in 0..d[1] {
            let row = ((x + m[0]) * s[1] + y + m[1]) * s[2] + m[2];
            out.extend_from_slice(&t.data()[row..row + d[2]]);
        }
    }
    Tensor::from_vec(d.to_vec(), out)
}

/// Response map `[X, Y, Z]`. The volume is first grown by the configured
/// margin; axes no larger than the tile are then processed whole.
pub fn infer_volume(graph: &ModelGraph, volume: &Tensor, tiling: &TilingConfig) -> Result<Tensor> {
    let d = as_grid(volume)?;
    if tiling.margin == [0; 3] {
        return infer_tiled(graph, volume, tiling);
    }
    let r = infer_tiled(graph, &pad_edges(volume, tiling.margin)?, tiling)?;
    crop(&r, tiling.margin, d)
}

fn infer_tiled(graph: &ModelGraph, volume: &Tensor, tiling: &TilingConfig) -> Result<Tensor> {
    let d = as_grid(volume)?;
    for a in 0..3 {
        if tiling.tile[a] == 0 || tiling.overlap[a] >= tiling.tile[a] {
            return Err(Error::Config(format!(
                "tile {:?} with overlap {:?} is not a valid tiling",
                tiling.tile, tiling.overlap
            )));
        }
    }
    let t = [0, 1, 2].map(|a| tiling.tile[a].min(d[a]));
    let src = volume.data();
    let offs = [0, 1, 2].map(|a| starts(d[a], t[a], tiling.overlap[a].min(t[a] - 1)));
    let n = d.iter().product::<usize>();
    if offs.iter().all(|o| o.len() == 1) {
        let x = Tensor::from_vec(vec![1, 1, d[0], d[1], d[2]], src.to_vec())?;
        let y = graph.infer(&x)?;
        return score_map(&y, d);
    }
    let mut sum = vec![0.0f32; n];
    let mut count = vec![0u32; n];
    for &ox in &offs[0] {
        for &oy in &offs[1] {
            for &oz in &offs[2] {
                let mut tile = Vec::with_capacity(t.iter().product());
                for x in 0..t[0] {
                    for y in 0..t[1] {
                        let base = ((ox + x) * d[1] + oy + y) * d[2] + oz;
                        tile.extend_from_slice(&src[base..base + t[2]]);
                    }
                }
                let y = graph.infer(&Tensor::from_vec(vec![1, 1, t[0], t[1], t[2]], tile)?)?;
                let r = score_map(&y, t)?;
                let r = r.data();
                for x in 0..t[0] {
                    for yy in 0..t[1] {
                        for z in 0..t[2] {
                            let i = ((ox + x) * d[1] + oy + yy) * d[2] + oz + z;
                            sum[i] += r[(x * t[1] + yy) * t[2] + z];
                            count[i] += 1;
                        }
                    }
                }
            }
        }
    }
    let out = sum.iter().zip(&count).map(|(&s, &c)| s / c as f32).collect();
    Tensor::from_vec(d.to_vec(), out)
}

/// Per-voxel score of a one-item network output: the single channel of a
/// detection head, or the foreground-minus-background logit of a two-class head.
fn score_map(y: &Tensor, d: [usize; 3]) -> Result<Tensor> {
    let n = d.iter().product::<usize>();
    if y.shape().len() != 5 || y.shape()[0] != 1 || y.shape()[2..] != d {
        return shape_err(format!("network returned {:?} for a {d:?} input", y.shape()));
    }
    Tensor::from_vec(d.to_vec(), score(y.data(), y.shape()[1], n)?)
}

fn score(v: &[f32], channels: usize, n: usize) -> Result<Vec<f32>> {
    match channels {
        1 => Ok(v[..n].to_vec()),
        2 => Ok(v[..n].iter().zip(&v[n..2 * n]).map(|(b, f)| f - b).collect()),
        c => shape_err(format!("no score for a {c}-channel output")),
    }
}

/// `[D, 3, X, Y]` slice triples of an `X×Y×D` volume. The first and last
/// slices stand in for their missing neighbours, as in training.
pub fn slice_batch(volume: &Tensor) -> Result<Tensor> {
    let d = as_grid(volume)?;
    let v = volume.data();
    let plane = d[0] * d[1];
    let mut out = vec![0.0f32; d[2] * 3 * plane];
    for k in 0..d[2] {
        for c in 0..3 {
            let z = (k + c).saturating_sub(1).min(d[2] - 1);
            let base = (k * 3 + c) * plane;
            for i in 0..plane {
                out[base + i] = v[i * d[2] + z];
            }
        }
    }
    Tensor::from_vec(vec![d[2], 3, d[0], d[1]], out)
}

/// Runs the 2D network on `batch` (from [`slice_batch`]) in chunks and
/// restacks the per-slice scores into `[X, Y, D]`.
pub fn infer_slice_batch(graph: &ModelGraph, batch: &Tensor, chunk: usize) -> Result<Tensor> {
    let &[depth, 3, x, y] = batch.shape() else {
        return shape_err(format!("expected [D,3,X,Y] slices, got {:?}", batch.shape()));
    };
    let plane = x * y;
    let mut out = vec![0.0f32; plane * depth];
    let chunk = chunk.max(1);
    let mut k0 = 0;
    while k0 < depth {
        let k1 = (k0 + chunk).min(depth);
        let part = Tensor::from_vec(vec![k1 - k0, 3, x, y], batch.data()[k0 * 3 * plane..k1 * 3 * plane].to_vec())?;
        let r = graph.infer(&part)?;
        let c = r.shape()[1];
        for k in k0..k1 {
            let at = (k - k0) * c * plane;
            let src = score(&r.data()[at..at + c * plane], c, plane)?;
            for (i, &v) in src.iter().enumerate() {
                out[i * depth + k] = v;
            }
        }
        k0 = k1;
    }
    Tensor::from_vec(vec![x, y, depth], out)
}

/// Slice-wise 2D response map `[X, Y, Z]`.
pub fn infer_slices(graph: &ModelGraph, volume: &Tensor, chunk: usize) -> Result<Tensor> {
    infer_slice_batch(graph, &slice_batch(volume)?, chunk)
}
