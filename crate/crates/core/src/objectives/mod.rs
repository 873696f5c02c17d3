//! Heatmap targets, losses and the optimizer.

pub mod adam;
pub mod heatmap;
pub mod loss;

pub use adam::{Adam, AdamConfig};
pub use heatmap::{gaussian_heatmap, Box3D, HeatmapSpec, PeakMode};
pub use loss::{cross_entropy, focal_ce, focal_l2, l2, FocalMode, FocalSpec};
