//! The declarative run configuration read by the CLI.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::eval::DEFAULT_FP_GRID;
use crate::infer::TilingConfig;
use crate::nets::{NetConfig, Preset};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Minimum response kept as a candidate finding; `-inf` keeps all maxima.
    pub threshold: f32,
    /// Suppression ellipsoid semi-axes in voxels.
    pub nms_radius: [f64; 3],
    pub fp_grid: Vec<f64>,
    pub tiling: TilingConfig,
    /// Slices per 2D forward pass.
    pub slice_chunk: usize,
    /// Probability cut for segmentation masks.
    pub mask_threshold: f32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold: f32::NEG_INFINITY,
            nms_radius: [5.0, 5.0, 2.0],
            fp_grid: DEFAULT_FP_GRID.to_vec(),
            tiling: TilingConfig::default(),
            slice_chunk: 8,
            mask_threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub dims: [usize; 3],
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            dims: [64, 64, 16],
            repeats: 10,
        }
    }
}

/// Everything a run needs. `seed` is copied into the synthetic data and
/// training sections by [`ExperimentConfig::resolved`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    /// Network overrides; the preset's numbers when absent.
    pub net: Option<NetConfig>,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            preset: Preset::Desk,
            seed: 0,
            n_train: 40,
            n_test: 10,
            net: None,
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Propagates the run seed and validates every section.
    pub fn resolved(mut self) -> Result<Self> {
        self.synth.seed = self.seed;
        self.train.seed = self.seed;
        self.synth.validate()?;
        self.train.validate()?;
        self.network().validate()?;
        if self.n_train == 0 {
            return Err(Error::Config("n_train must be positive".into()));
        }
        Ok(self)
    }

    pub fn network(&self) -> NetConfig {
        let mut n = self.net.clone().unwrap_or_else(|| NetConfig::preset(self.preset));
        n.out_channels = self.train.out_channels();
        n.patch = self.train.patch;
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
        let p = ExperimentConfig::from_toml("seed = 7\n[train]\nepochs_stage1 = 2\n").unwrap();
        assert_eq!(p.seed, 7);
        assert_eq!(p.train.epochs_stage1, 2);
        assert_eq!(p.train.positive_fraction, 0.7);
        let r = p.resolved().unwrap();
        assert_eq!(r.synth.seed, 7);
        assert!(ExperimentConfig::from_toml("seed = \"x\"").is_err());
    }
}
