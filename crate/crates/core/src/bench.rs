//! Per-volume inference timing: the 2D network over every slice triple versus
//! one hybrid 3D pass. Slicing happens before the timed region.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::{infer_slice_batch, slice_batch};
use crate::nets::{ModelGraph, Preset};
use crate::tensor::Tensor;

/// Streaming mean and variance.
#[derive(Clone, Copy, Debug, Default)]
pub struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Sample standard deviation.
    pub fn std(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.m2 / (self.n - 1) as f64).sqrt()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub preset: Preset,
    pub dims: [usize; 3],
    pub repeats: usize,
    pub slicewise_2d_mean_ms: f64,
    pub slicewise_2d_std_ms: f64,
    pub hybrid_3d_mean_ms: f64,
    pub hybrid_3d_std_ms: f64,
    /// `slicewise_2d_mean / hybrid_3d_mean`.
    pub ratio: f64,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        format!(
            "model,mean_ms,std_ms,repeats,dims\nslicewise_2d,{:.4},{:.4},{},{}x{}x{}\nhybrid_3d,{:.4},{:.4},{},{}x{}x{}\nratio,{:.4},,,\n",
            self.slicewise_2d_mean_ms,
            self.slicewise_2d_std_ms,
            self.repeats,
            self.dims[0],
            self.dims[1],
            self.dims[2],
            self.hybrid_3d_mean_ms,
            self.hybrid_3d_std_ms,
            self.repeats,
            self.dims[0],
            self.dims[1],
            self.dims[2],
            self.ratio
        )
    }
}

/// Times `repeats` forward passes of each model on one random volume. The
/// 2D network processes all slices of the volume in batches of `chunk`.
pub fn benchmark_inference(
    model2d: &ModelGraph,
    model3d: &ModelGraph,
    preset: Preset,
    dims: [usize; 3],
    repeats: usize,
    chunk: usize,
) -> Result<BenchReport> {
    if repeats < 3 {
        return Err(Error::Config(format!("benchmark needs at least 3 repeats, got {repeats}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let vol = Tensor::uniform(&dims, -1.0, 1.0, &mut rng);
    let input3d = vol.clone().reshape(vec![1, 1, dims[0], dims[1], dims[2]])?;
    let slices = slice_batch(&vol)?;
    // Warm-up outside the timed region.
    infer_slice_batch(model2d, &slices, chunk)?;
    model3d.infer(&input3d)?;
    let mut w2 = Welford::default();
    let mut w3 = Welford::default();
    for _ in 0..repeats {
        let t = Instant::now();
        let r = infer_slice_batch(model2d, &slices, chunk)?;
        w2.push(t.elapsed().as_secs_f64() * 1e3);
        drop(r);
        let t = Instant::now();
        let r = model3d.infer(&input3d)?;
        w3.push(t.elapsed().as_secs_f64() * 1e3);
        drop(r);
    }
    Ok(BenchReport {
        preset,
        dims,
        repeats,
        slicewise_2d_mean_ms: w2.mean(),
        slicewise_2d_std_ms: w2.std(),
        hybrid_3d_mean_ms: w3.mean(),
        hybrid_3d_std_ms: w3.std(),
        ratio: w2.mean() / w3.mean(),
    })
}
