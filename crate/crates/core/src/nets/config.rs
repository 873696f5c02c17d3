use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }
}

/// Where the hybrid encoder pools along z.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZPooling {
    /// `MaxPool 1×1×2` after the stem convolution.
    pub stem: bool,
    /// Depth window 3 in the stem's `3×3×3` pool.
    pub stem_pool: bool,
    /// One flag per stage boundary (entering stages 2, 3, 4).
    pub boundaries: Vec<bool>,
}

impl ZPooling {
    pub fn all(stages: usize) -> Self {
        ZPooling {
            stem: true,
            stem_pool: true,
            boundaries: vec![true; stages.saturating_sub(1)],
        }
    }

    /// Every z-pool replaced by its identity, for slice-equivalence checks.
    pub fn disabled(stages: usize) -> Self {
        ZPooling {
            stem: false,
            stem_pool: false,
            boundaries: vec![false; stages.saturating_sub(1)],
        }
    }

    /// Number of depth halvings applied before each stage's output.
    pub fn halvings(&self) -> Vec<usize> {
        let stem = self.stem as usize + self.stem_pool as usize;
        let mut out = vec![stem];
        for &b in &self.boundaries {
            out.push(out.last().unwrap() + b as usize);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub preset: Preset,
    pub stem_width: usize,
    /// Output width of each residual stage.
    pub stage_widths: Vec<usize>,
    pub blocks: Vec<usize>,
    /// GCN kernel per decoder level, highest resolution first: input image,
    /// stem, then one per stage.
    pub gcn_kernels: Vec<usize>,
    /// Growth and mid width of the anisotropic decoder blocks.
    pub decoder_width: usize,
    pub dense_blocks: usize,
    pub pyramid_pools: Vec<usize>,
    pub out_channels: usize,
    pub z_pooling: ZPooling,
    /// Input patch extents `(x, y, z)` the graphs are audited at.
    pub patch: [usize; 3],
}

impl NetConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => Self::paper(),
            Preset::Desk => Self::desk(),
        }
    }

    /// ResNet50-shaped encoder at full width.
    pub fn paper() -> Self {
        NetConfig {
            preset: Preset::Paper,
            stem_width: 64,
            stage_widths: vec![256, 512, 1024, 2048],
            blocks: vec![3, 4, 6, 3],
            gcn_kernels: vec![63, 31, 15, 9, 7, 5],
            decoder_width: 32,
            dense_blocks: 3,
            pyramid_pools: vec![64, 32, 16, 8],
            out_channels: 1,
            z_pooling: ZPooling::all(4),
            patch: [256, 256, 32],
        }
    }

    pub fn desk() -> Self {
        NetConfig {
            preset: Preset::Desk,
            stem_width: 8,
            stage_widths: vec![16, 32, 64, 128],
            blocks: vec![1, 1, 1, 1],
            gcn_kernels: vec![7, 7, 5, 5, 3, 3],
            decoder_width: 16,
            dense_blocks: 3,
            pyramid_pools: vec![16, 8, 4, 2],
            out_channels: 1,
            // An 8-slice patch has depth 2 after the stem; one more halving
            // exhausts it.
            z_pooling: ZPooling {
                stem: true,
                stem_pool: true,
                boundaries: vec![true, false, false],
            },
            patch: [64, 64, 8],
        }
    }

    pub fn stages(&self) -> usize {
        self.stage_widths.len()
    }

    /// Decoder levels of the 2D network: input, stem and one per stage.
    pub fn levels(&self) -> usize {
        self.stages() + 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stem_width == 0 || self.stage_widths.is_empty() {
            return bad("empty width schedule".into());
        }
        if self.stage_widths.iter().any(|&w| w == 0) {
            return bad(format!("zero stage width in {:?}", self.stage_widths));
        }
        if self.stage_widths.windows(2).any(|w| w[1] < w[0]) || self.stage_widths[0] < self.stem_width {
            return bad(format!(
                "widths must be non-decreasing: stem {} then {:?}",
                self.stem_width, self.stage_widths
            ));
        }
        if self.stage_widths.iter().any(|w| w % 4 != 0) {
            return bad("bottleneck stage widths must be divisible by 4".into());
        }
        if self.blocks.len() != self.stages() || self.blocks.iter().any(|&b| b == 0) {
            return bad(format!("need >= 1 block for each of {} stages", self.stages()));
        }
        if self.gcn_kernels.len() != self.levels() {
            return bad(format!(
                "{} GCN kernels for {} decoder levels",
                self.gcn_kernels.len(),
                self.levels()
            ));
        }
        if self.gcn_kernels.iter().any(|k| k % 2 == 0) {
            return bad(format!("GCN kernels must be odd: {:?}", self.gcn_kernels));
        }
        if self.decoder_width == 0 || self.dense_blocks == 0 || self.out_channels == 0 {
            return bad("decoder widths must be positive".into());
        }
        if self.pyramid_pools.iter().any(|&p| p == 0) {
            return bad("pyramid pools must be positive".into());
        }
        if self.z_pooling.boundaries.len() + 1 != self.stages() {
            return bad(format!(
                "{} z-pool flags for {} stage boundaries",
                self.z_pooling.boundaries.len(),
                self.stages() - 1
            ));
        }
        if self.patch.iter().any(|&p| p == 0) {
            return bad("patch extents must be positive".into());
        }
        Ok(())
    }

    /// Shape of one 2D training input: three neighbouring slices as channels.
    pub fn input_shape_2d(&self) -> Vec<usize> {
        vec![1, 3, self.patch[0], self.patch[1]]
    }

    pub fn input_shape_3d(&self) -> Vec<usize> {
        vec![1, 1, self.patch[0], self.patch[1], self.patch[2]]
    }
}
