use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Axis-aligned lesion box in voxel coordinates `(x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    /// Full width along x, y and z.
    pub extent: [f64; 3],
}

impl Box3D {
    pub fn new(center: [f64; 3], extent: [f64; 3]) -> Result<Self> {
        let b = Box3D { center, extent };
        if extent.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
            return Err(Error::InvalidSpec(format!("non-positive box extent {extent:?}")));
        }
        Ok(b)
    }

    /// Inclusive containment test for a voxel position.
    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| (p[a] as f64 - self.center[a]).abs() <= self.extent[a] / 2.0)
    }

    /// True when the whole box lies inside `[0, dims)` on every axis.
    pub fn fits_in(&self, dims: [usize; 3]) -> bool {
        (0..3).all(|a| {
            let lo = self.center[a] - self.extent[a] / 2.0;
            let hi = self.center[a] + self.extent[a] / 2.0;
            lo >= 0.0 && hi <= (dims[a] - 1) as f64
        })
    }

    pub fn center_in(&self, dims: [usize; 3]) -> bool {
        (0..3).all(|a| self.center[a] >= 0.0 && self.center[a] <= (dims[a] - 1) as f64)
    }

    /// Box shifted into the frame of a crop starting at `origin`.
    pub fn shifted(&self, origin: [usize; 3]) -> Box3D {
        Box3D {
            center: [
                self.center[0] - origin[0] as f64,
                self.center[1] - origin[1] as f64,
                self.center[2] - origin[2] as f64,
            ],
            extent: self.extent,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PeakMode {
    /// Peak `1/sqrt(det(2πΣ))`, a normalized density.
    Density,
    #[default]
    UnitPeak,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSpec {
    /// `σ_axis = extent_axis / sigma_divisor`.
    pub sigma_divisor: f64,
    pub mode: PeakMode,
}

impl Default for HeatmapSpec {
    fn default() -> Self {
        HeatmapSpec {
            sigma_divisor: 4.0,
            mode: PeakMode::UnitPeak,
        }
    }
}

/// Sum of diagonal-covariance Gaussians at the box centres, sampled on a
/// `X×Y×Z` grid (z fastest).
pub fn gaussian_heatmap(boxes: &[Box3D], dims: [usize; 3], spec: &HeatmapSpec) -> Result<Tensor> {
    if !(spec.sigma_divisor > 0.0) {
        return Err(Error::InvalidSpec("sigma divisor must be > 0".into()));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidSpec(format!("empty heatmap dims {dims:?}")));
    }
    let mut acc = vec![0.0f64; dims.iter().product()];
    for b in boxes {
        if b.extent.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::InvalidSpec(format!("non-positive box extent {:?}", b.extent)));
        }
        if !b.center_in(dims) {
            return Err(Error::InvalidSpec(format!(
                "box centre {:?} outside volume {dims:?}",
                b.center
            )));
        }
        let sigma: Vec<f64> = b.extent.iter().map(|e| e / spec.sigma_divisor).collect();
        let peak = match spec.mode {
            PeakMode::UnitPeak => 1.0,
            PeakMode::Density => {
                let det: f64 = sigma
                    .iter()
                    .map(|s| 2.0 * std::f64::consts::PI * s * s)
                    .product();
                1.0 / det.sqrt()
            }
        };
        let axis = |a: usize| -> Vec<f64> {
            (0..dims[a])
                .map(|i| {
                    let u = (i as f64 - b.center[a]) / sigma[a];
                    -0.5 * u * u
                })
                .collect()
        };
        let (ex, ey, ez) = (axis(0), axis(1), axis(2));
        let mut i = 0;
        for qx in &ex {
            for qy in &ey {
                for qz in &ez {
                    acc[i] += peak * (qx + qy + qz).exp();
                    i += 1;
                }
            }
        }
    }
    Tensor::from_vec(dims.to_vec(), acc.into_iter().map(|v| v as f32).collect())
}
