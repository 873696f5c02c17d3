//! Synthetic anisotropic volumes: smooth texture, blurred ellipsoidal lesions
//! with boxes and masks, small bright distractors and noise.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::volume::Volume;
use crate::error::{Error, Result};
use crate::objectives::Box3D;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub dims: [usize; 3],
    /// In-plane spacing `r_x = r_y` in mm.
    pub spacing_xy: f32,
    /// `r_z / r_x`.
    pub anisotropy: f32,
    /// Inclusive range of lesions per volume.
    pub lesions: [usize; 2],
    /// Lesion extent range in voxels, in-plane and along z.
    pub extent_xy: [f64; 2],
    pub extent_z: [f64; 2],
    /// Mean lesion intensity above background.
    pub contrast: f32,
    pub texture: f32,
    pub noise: f32,
    /// Gaussian blur sigma (voxels) applied to lesions, in-plane and along z.
    pub blur: [f64; 2],
    /// Inclusive range of one-slice bright spots per volume.
    pub distractors: [usize; 2],
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dims: [96, 96, 24],
            spacing_xy: 0.5,
            anisotropy: 8.0,
            lesions: [1, 3],
            extent_xy: [8.0, 14.0],
            extent_z: [3.0, 6.0],
            contrast: 1.0,
            texture: 0.4,
            noise: 0.15,
            blur: [0.7, 1.2],
            distractors: [0, 2],
            seed: 0,
        }
    }
}

const MIN_GAP: f64 = 2.0;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dims.iter().any(|&d| d == 0) {
            return bad(format!("zero volume extent {:?}", self.dims));
        }
        if !(self.spacing_xy > 0.0) || !(self.anisotropy >= 1.0) {
            return bad("spacing must be positive and r_z >= r_x".into());
        }
        if self.lesions[0] > self.lesions[1] || self.distractors[0] > self.distractors[1] {
            return bad("count ranges must be ordered".into());
        }
        for (name, r) in [("extent_xy", self.extent_xy), ("extent_z", self.extent_z)] {
            if !(r[0] > 0.0) || r[0] > r[1] {
                return bad(format!("{name} must be a positive ordered range, got {r:?}"));
            }
        }
        let fits = |e: f64, d: usize| e <= (d - 1) as f64;
        if !fits(self.extent_xy[1], self.dims[0]) || !fits(self.extent_xy[1], self.dims[1]) || !fits(self.extent_z[1], self.dims[2]) {
            return bad(format!(
                "lesion extents up to {}×{}×{} do not fit in {:?}",
                self.extent_xy[1], self.extent_xy[1], self.extent_z[1], self.dims
            ));
        }
        if self.noise < 0.0 || self.texture < 0.0 || self.blur.iter().any(|&b| b < 0.0) {
            return bad("noise, texture and blur must be non-negative".into());
        }
        Ok(())
    }

    pub fn spacing(&self) -> [f32; 3] {
        [self.spacing_xy, self.spacing_xy, self.spacing_xy * self.anisotropy]
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter().map(|v| (v / s) as f32).collect()
}

/// Separable zero-boundary blur of an `X×Y×Z` (z fastest) grid.
fn blur(data: &mut [f32], d: [usize; 3], sigma: [f64; 3]) {
    let strides = [d[1] * d[2], d[2], 1];
    let mut tmp = vec![0.0f32; data.len()];
    for axis in 0..3 {
        let k = gaussian_kernel(sigma[axis]);
        if k.len() == 1 {
            continue;
        }
        let r = (k.len() / 2) as isize;
        let (n, st) = (d[axis] as isize, strides[axis]);
        for (i, out) in tmp.iter_mut().enumerate() {
            let pos = ((i / st) % d[axis]) as isize;
            let mut acc = 0.0f32;
            for (j, &w) in k.iter().enumerate() {
                let q = pos + j as isize - r;
                if q >= 0 && q < n {
                    acc += w * data[(i as isize + (q - pos) * st as isize) as usize];
                }
            }
            *out = acc;
        }
        data.copy_from_slice(&tmp);
    }
}

fn overlaps(a: &Box3D, b: &Box3D) -> bool {
    (0..3).all(|i| (a.center[i] - b.center[i]).abs() < (a.extent[i] + b.extent[i]) / 2.0 + MIN_GAP)
}

/// One volume from its own RNG stream: lesion boxes are placed without overlap.
pub fn synth_volume(cfg: &SynthConfig, index: u64) -> Result<(Volume, Vec<Box3D>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let d = cfg.dims;
    let n = d.iter().product::<usize>();

    // Background: a few low-frequency plane waves, mostly in-plane.
    let waves: Vec<([f64; 3], f64)> = (0..6)
        .map(|_| {
            let period = rng.gen_range(16.0..48.0);
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let kz = rng.gen_range(-0.3..0.3);
            let w = std::f64::consts::TAU / period;
            ([w * theta.cos(), w * theta.sin(), w * kz], rng.gen_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let amp = cfg.texture as f64 / (waves.len() as f64).sqrt();
    let mut vox = vec![0.0f32; n];
    for x in 0..d[0] {
        for y in 0..d[1] {
            for z in 0..d[2] {
                let p = [x as f64, y as f64, z as f64];
                let v: f64 = waves
                    .iter()
                    .map(|(k, ph)| (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + ph).cos())
                    .sum();
                vox[(x * d[1] + y) * d[2] + z] = (amp * v) as f32;
            }
        }
    }

    let count = rng.gen_range(cfg.lesions[0]..=cfg.lesions[1]);
    let mut boxes: Vec<Box3D> = Vec::new();
    let mut tries = 0;
    while boxes.len() < count {
        tries += 1;
        if tries > 1000 {
            return Err(Error::Data(format!("could not place {count} lesions in {d:?}")));
        }
        let e = [
            rng.gen_range(cfg.extent_xy[0]..=cfg.extent_xy[1]),
            rng.gen_range(cfg.extent_xy[0]..=cfg.extent_xy[1]),
            rng.gen_range(cfg.extent_z[0]..=cfg.extent_z[1]),
        ];
        let c = [0, 1, 2].map(|a| rng.gen_range(e[a] / 2.0..=(d[a] - 1) as f64 - e[a] / 2.0));
        let b = Box3D::new(c, e)?;
        if boxes.iter().all(|o| !overlaps(o, &b)) {
            boxes.push(b);
        }
    }

    let mut lesion = vec![0.0f32; n];
    let mut mask = vec![0u8; n];
    for b in &boxes {
        let level = cfg.contrast * rng.gen_range(0.8..1.2);
        let lo = [0, 1, 2].map(|a| (b.center[a] - b.extent[a] / 2.0).floor().max(0.0) as usize);
        let hi = [0, 1, 2].map(|a| ((b.center[a] + b.extent[a] / 2.0).ceil() as usize).min(d[a] - 1));
        for x in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for z in lo[2]..=hi[2] {
                    let p = [x, y, z];
                    let r2: f64 = (0..3)
                        .map(|a| ((p[a] as f64 - b.center[a]) / (b.extent[a] / 2.0)).powi(2))
                        .sum();
                    if r2 <= 1.0 {
                        let i = (x * d[1] + y) * d[2] + z;
                        lesion[i] = level;
                        mask[i] = 1;
                    }
                }
            }
        }
    }
    blur(&mut lesion, d, [cfg.blur[0], cfg.blur[0], cfg.blur[1]]);

    // Distractors: bright in-plane spots confined to one slice.
    let spots = rng.gen_range(cfg.distractors[0]..=cfg.distractors[1]);
    for _ in 0..spots {
        let r = rng.gen_range(1.0..2.0f64);
        let c = [
            rng.gen_range(0.0..(d[0] - 1) as f64),
            rng.gen_range(0.0..(d[1] - 1) as f64),
        ];
        let z = rng.gen_range(0..d[2]);
        let level = 1.5 * cfg.contrast;
        for x in 0..d[0] {
            for y in 0..d[1] {
                let q = ((x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2)) / (r * r);
                if q <= 4.0 {
                    lesion[(x * d[1] + y) * d[2] + z] += level * (-q).exp() as f32;
                }
            }
        }
    }

    let normal = Normal::new(0.0, cfg.noise.max(0.0) as f64).map_err(|e| Error::Config(e.to_string()))?;
    for (v, l) in vox.iter_mut().zip(&lesion) {
        *v += l + normal.sample(&mut rng) as f32;
    }
    let vol = Volume::new(Tensor::from_vec(d.to_vec(), vox)?, cfg.spacing(), Some(mask))?;
    Ok((vol, boxes))
}

pub fn volume_name(i: usize) -> String {
    format!("vol_{i:03}.avol")
}

/// Volumes `first..first + n` of the seed's streams as an in-memory dataset.
pub fn synth_dataset(cfg: &SynthConfig, first: usize, n: usize) -> Result<Dataset> {
    let mut ds = Dataset::default();
    for i in first..first + n {
        let (v, b) = synth_volume(cfg, i as u64)?;
        for bx in &b {
            if !bx.fits_in(v.dims()) {
                return Err(Error::Data(format!("box {bx:?} leaves volume {i}")));
            }
        }
        ds.push(volume_name(i - first), v, b);
    }
    Ok(ds)
}

/// Writes `n` volumes plus `annotations.json` into `dir`.
pub fn synth_generate(cfg: &SynthConfig, n: usize, dir: impl AsRef<Path>) -> Result<Dataset> {
    let ds = synth_dataset(cfg, 0, n)?;
    ds.save(dir)?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blur_preserves_mass_in_interior() {
        let d = [9, 9, 9];
        let mut v = vec![0.0f32; 729];
        v[(4 * 9 + 4) * 9 + 4] = 1.0;
        blur(&mut v, d, [1.0, 1.0, 1.0]);
        let s: f32 = v.iter().sum();
        assert!((s - 1.0).abs() < 1e-5);
        assert!(v[(4 * 9 + 4) * 9 + 5] < v[(4 * 9 + 4) * 9 + 4]);
    }

    #[test]
    fn oversized_lesions_are_rejected() {
        let cfg = SynthConfig {
            extent_z: [3.0, 40.0],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn streams_differ() {
        let cfg = SynthConfig::default();
        let a = synth_volume(&cfg, 0).unwrap();
        let b = synth_volume(&cfg, 1).unwrap();
        assert_ne!(a.0, b.0);
        assert_eq!(a, synth_volume(&cfg, 0).unwrap());
    }
}
