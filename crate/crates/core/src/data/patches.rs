//! Positive/negative patch sampling with optional background production.

use std::sync::Arc;
use std::thread::JoinHandle;

use crossbeam_channel::{bounded, Receiver};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{augment, AugmentConfig, AugmentParams, Interp};
use super::dataset::Dataset;
use crate::error::{Error, Result};
use crate::objectives::{gaussian_heatmap, HeatmapSpec};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// Heatmap regression with L2 / focal L2.
    #[default]
    Detection,
    /// Two-class voxel labelling with cross-entropy / focal CE.
    Segmentation,
}

/// What the sampler hands the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// `[3, X, Y]` slice triple around one slice; `[1, X, Y]` target.
    Planar,
    /// `[1, X, Y, Z]` patch and target.
    Volumetric,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    /// Patch extents; the depth is ignored for planar sampling.
    pub patch: [usize; 3],
    pub positive_fraction: f64,
    pub task: Task,
    pub heatmap: HeatmapSpec,
    /// Heatmap peak value of the training target.
    pub target_scale: f32,
    pub augment: AugmentConfig,
}

#[derive(Clone, Debug)]
pub struct Patch {
    pub input: Tensor,
    pub target: Tensor,
    pub positive: bool,
    pub volume: usize,
    pub origin: [usize; 3],
    pub augment: Option<AugmentParams>,
}

pub struct PatchSampler {
    ds: Arc<Dataset>,
    cfg: SamplerConfig,
    layout: Layout,
    /// Full-volume targets, `[X, Y, Z]`.
    targets: Vec<Tensor>,
    /// Rounded lesion centres per volume.
    centers: Vec<Vec<[usize; 3]>>,
    all_centers: Vec<(usize, [usize; 3])>,
}

/// Full-volume training target of volume `i`.
pub fn volume_target(ds: &Dataset, i: usize, task: Task, heatmap: &HeatmapSpec, scale: f32) -> Result<Tensor> {
    let v = &ds.volumes[i];
    match task {
        Task::Detection => Ok(gaussian_heatmap(&ds.boxes[i], v.dims(), heatmap)?.map(|x| x * scale)),
        Task::Segmentation => {
            let m = v
                .mask
                .as_ref()
                .ok_or_else(|| Error::Data(format!("`{}` has no mask for segmentation", ds.names[i])))?;
            Tensor::from_vec(v.dims().to_vec(), m.iter().map(|&b| b as f32).collect())
        }
    }
}

impl PatchSampler {
    pub fn new(ds: Arc<Dataset>, cfg: SamplerConfig, layout: Layout) -> Result<Self> {
        if !(0.0..=1.0).contains(&cfg.positive_fraction) {
            return Err(Error::Config(format!("positive fraction {} outside [0, 1]", cfg.positive_fraction)));
        }
        if ds.is_empty() {
            return Err(Error::Data("empty dataset".into()));
        }
        let p = Self::extents(&cfg, layout);
        for (n, v) in ds.names.iter().zip(&ds.volumes) {
            let d = v.dims();
            if (0..3).any(|a| p[a] > d[a]) {
                return Err(Error::Data(format!("patch {p:?} larger than `{n}` {d:?}")));
            }
        }
        let centers: Vec<Vec<[usize; 3]>> = ds
            .boxes
            .iter()
            .zip(&ds.volumes)
            .map(|(bs, v)| {
                let d = v.dims();
                bs.iter()
                    .map(|b| [0, 1, 2].map(|a| (b.center[a].round().max(0.0) as usize).min(d[a] - 1)))
                    .collect()
            })
            .collect();
        let all_centers: Vec<_> = centers
            .iter()
            .enumerate()
            .flat_map(|(i, cs)| cs.iter().map(move |&c| (i, c)))
            .collect();
        if all_centers.is_empty() && cfg.positive_fraction > 0.0 {
            return Err(Error::Data(
                "dataset has no lesions but the positive fraction is above zero".into(),
            ));
        }
        let targets = (0..ds.len())
            .map(|i| volume_target(&ds, i, cfg.task, &cfg.heatmap, cfg.target_scale))
            .collect::<Result<_>>()?;
        Ok(PatchSampler {
            ds,
            cfg,
            layout,
            targets,
            centers,
            all_centers,
        })
    }

    fn extents(cfg: &SamplerConfig, layout: Layout) -> [usize; 3] {
        match layout {
            Layout::Planar => [cfg.patch[0], cfg.patch[1], 1],
            Layout::Volumetric => cfg.patch,
        }
    }

    pub fn patch_extents(&self) -> [usize; 3] {
        Self::extents(&self.cfg, self.layout)
    }

    fn contains_center(&self, vol: usize, origin: [usize; 3]) -> bool {
        let p = self.patch_extents();
        self.centers[vol]
            .iter()
            .any(|c| (0..3).all(|a| c[a] >= origin[a] && c[a] < origin[a] + p[a]))
    }

    /// One patch: positive (contains a lesion centre) with the configured
    /// probability, otherwise a patch free of lesion centres.
    pub fn sample(&self, rng: &mut impl Rng) -> Result<Patch> {
        let p = self.patch_extents();
        let positive = rng.gen_bool(self.cfg.positive_fraction);
        let (vol, origin) = if positive {
            let (vol, c) = self.all_centers[rng.gen_range(0..self.all_centers.len())];
            let d = self.ds.volumes[vol].dims();
            let o = [0, 1, 2].map(|a| {
                let lo = (c[a] + 1).saturating_sub(p[a]);
                let hi = c[a].min(d[a] - p[a]);
                rng.gen_range(lo..=hi)
            });
            (vol, o)
        } else {
            let mut found = None;
            for _ in 0..1000 {
                let vol = rng.gen_range(0..self.ds.len());
                let d = self.ds.volumes[vol].dims();
                let o = [0, 1, 2].map(|a| rng.gen_range(0..=d[a] - p[a]));
                if !self.contains_center(vol, o) {
                    found = Some((vol, o));
                    break;
                }
            }
            found.ok_or_else(|| Error::Data("no lesion-free patch position found".into()))?
        };
        let (input, target) = self.crop(vol, origin)?;
        let (input, target, params) = if self.cfg.augment.enabled {
            let params = AugmentParams::sample(&self.cfg.augment, self.layout == Layout::Planar, rng);
            log::trace!("augment volume {vol} origin {origin:?}: {params:?}");
            let interp = match self.cfg.task {
                Task::Detection => Interp::Linear,
                Task::Segmentation => Interp::Nearest,
            };
            let (i, t) = augment(&input, &target, interp, &params)?;
            (i, t, Some(params))
        } else {
            (input, target, None)
        };
        Ok(Patch {
            input,
            target,
            positive,
            volume: vol,
            origin,
            augment: params,
        })
    }

    /// Unaugmented input and target at `origin`.
    pub fn crop(&self, vol: usize, origin: [usize; 3]) -> Result<(Tensor, Tensor)> {
        let v = &self.ds.volumes[vol].voxels;
        let t = &self.targets[vol];
        let d = self.ds.volumes[vol].dims();
        let p = self.patch_extents();
        // Neighbours beyond the first or last slice repeat the edge slice.
        let at = |src: &Tensor, x: usize, y: usize, z: isize| -> f32 {
            let z = z.clamp(0, d[2] as isize - 1) as usize;
            src.data()[((origin[0] + x) * d[1] + origin[1] + y) * d[2] + z]
        };
        match self.layout {
            Layout::Planar => {
                let z = origin[2] as isize;
                let mut inp = Vec::with_capacity(3 * p[0] * p[1]);
                for c in 0..3 {
                    for x in 0..p[0] {
                        for y in 0..p[1] {
                            inp.push(at(v, x, y, z + c as isize - 1));
                        }
                    }
                }
                let mut tg = Vec::with_capacity(p[0] * p[1]);
                for x in 0..p[0] {
                    for y in 0..p[1] {
                        tg.push(at(t, x, y, z));
                    }
                }
                Ok((
                    Tensor::from_vec(vec![3, p[0], p[1]], inp)?,
                    Tensor::from_vec(vec![1, p[0], p[1]], tg)?,
                ))
            }
            Layout::Volumetric => {
                let mut inp = Vec::with_capacity(p.iter().product());
                let mut tg = Vec::with_capacity(p.iter().product());
                for x in 0..p[0] {
                    for y in 0..p[1] {
                        for z in 0..p[2] {
                            let zz = (origin[2] + z) as isize;
                            inp.push(at(v, x, y, zz));
                            tg.push(at(t, x, y, zz));
                        }
                    }
                }
                Ok((
                    Tensor::from_vec(vec![1, p[0], p[1], p[2]], inp)?,
                    Tensor::from_vec(vec![1, p[0], p[1], p[2]], tg)?,
                ))
            }
        }
    }
}

/// Stacks patches into `(N, C, ...)` input and target batches.
pub fn collate(patches: &[Patch]) -> Result<(Tensor, Tensor)> {
    let add_batch = |t: &Tensor| {
        let mut s = vec![1];
        s.extend(t.shape());
        t.clone().reshape(s)
    };
    let inputs = patches.iter().map(|p| add_batch(&p.input)).collect::<Result<Vec<_>>>()?;
    let targets = patches.iter().map(|p| add_batch(&p.target)).collect::<Result<Vec<_>>>()?;
    Ok((Tensor::cat_batch(&inputs)?, Tensor::cat_batch(&targets)?))
}

/// Patches produced on a background thread through a bounded queue. A single
/// producer draws from one seeded RNG, so the sequence does not depend on the
/// queue depth or on consumer timing.
pub struct PatchStream {
    rx: Option<Receiver<Result<Patch>>>,
    handle: Option<JoinHandle<()>>,
}

impl PatchStream {
    pub fn spawn(sampler: Arc<PatchSampler>, seed: u64, count: usize, depth: usize) -> Self {
        let (tx, rx) = bounded(depth.max(1));
        let handle = std::thread::spawn(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..count {
                let p = sampler.sample(&mut rng);
                let stop = p.is_err();
                if tx.send(p).is_err() || stop {
                    return;
                }
            }
        });
        PatchStream {
            rx: Some(rx),
            handle: Some(handle),
        }
    }
}

impl Iterator for PatchStream {
    type Item = Result<Patch>;

    fn next(&mut self) -> Option<Self::Item> {
        self.rx.as_ref()?.recv().ok()
    }
}

impl Drop for PatchStream {
    fn drop(&mut self) {
        // Disconnect first so a blocked producer returns.
        self.rx.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
